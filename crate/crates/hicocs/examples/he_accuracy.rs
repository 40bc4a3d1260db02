//! The two ciphertext backends under the operations settlement uses:
//! packed encoding, addition, slot rotation folds, and a rate multiply.
//!
//! The exact backend is for oracles and tests: it carries scaled integers
//! and decodes exactly. The approximate backend models a real
//! fixed-point-packing scheme by injecting calibrated noise per operation;
//! its decoded aggregates must stay within the advertised relative bound.
//!
//! Run with: cargo run --example he_accuracy

use hicocs::acceptance::oracles;
use hicocs::crypto::{HeBackend, HeBackendKind, HeParams, KeyStore, Role, ADVERTISED_RELATIVE_BOUND};
use hicocs::{Amount, Rate, SimTime};
use rand::{Rng, SeedableRng};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let amounts: Vec<Amount> = (0..1_000)
        .map(|_| Amount::from_units(rng.gen_range(1..=1_000_000i128)))
        .collect();
    let rate = Rate::from_f64(1.37)?;
    let (plain_out, plain_in) = oracles::exact_settlement_sums(&amounts, rate);
    println!("plaintext sum {plain_out:.6}, after rate {plain_in:.6}");
    println!("advertised relative bound: {ADVERTISED_RELATIVE_BOUND:e}\n");

    for kind in [HeBackendKind::Mock, HeBackendKind::Approximate] {
        let store = KeyStore::new();
        let keyset = store.generate_he_keyset(SimTime::ZERO);
        let backend = HeBackend::new(kind, HeParams::default(), 11)?;
        let n = backend.params().slot_count;

        // Pack, encrypt, fold all slots into slot 0 by log2(n) rotations,
        // then apply the encrypted conversion rate.
        let cipher = backend.he_encrypt(&keyset, &backend.he_encode(&amounts)?);
        let summed = backend.he_inner_sum(&cipher, amounts.len(), n, &keyset)?;
        let c_rate = backend.he_encrypt(&keyset, &backend.he_encode_rate(rate));
        let converted = backend.he_mul(&summed, &c_rate, &keyset)?;

        // Only the conversion service may decode.
        let grant = store.he_secret(Role::ConversionService, &keyset, SimTime::ZERO)?;
        let out = backend.he_decrypt_decode(&grant, &summed)?[0];
        let inn = backend.he_decrypt_decode(&grant, &converted)?[0];

        let err_out = oracles::relative_error(out, plain_out);
        let err_in = oracles::relative_error(inn, plain_in);
        println!("{kind}:");
        println!("  decoded sum {out:.10}  (relative error {err_out:.3e})");
        println!("  converted   {inn:.10}  (relative error {err_in:.3e})");
        match kind {
            HeBackendKind::Mock => {
                assert_eq!(out, plain_out, "exact backend must decode bit-equal");
                println!("  exact: decoded sum equals the plaintext sum bit for bit");
            }
            HeBackendKind::Approximate => {
                assert!(err_out <= ADVERTISED_RELATIVE_BOUND);
                assert!(err_in <= ADVERTISED_RELATIVE_BOUND);
                println!("  within the advertised bound after {} slot folds + 1 multiply", n.ilog2());
            }
        }
        println!("  ciphertext level after multiply: {}", converted.level);
        println!();
    }
    Ok(())
}
