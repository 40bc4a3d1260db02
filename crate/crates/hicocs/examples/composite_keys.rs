//! Composite keys: flat ledger keys that behave like an index.
//!
//! A composite key renders a prefix plus attribute list into one string
//! whose lexicographic order groups entries by attribute prefix. Partial
//! queries then walk exactly one contiguous range, and the ledger counts
//! how many live entries each query touched, which is the cost model the
//! settlement path optimizes against.
//!
//! Run with: cargo run --example composite_keys

use hicocs::ledger::{create_composite_key, split_composite_key, VersionedWorldState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // One entry per pooled transfer: prefix "cstx", attributes
    // [intermediary, initiator, sequence].
    let mut state = VersionedWorldState::new();
    let mut writes = Vec::new();
    for g in ["g1", "g2", "g3"] {
        for o in ["o1", "o2"] {
            for seq in 0..3 {
                let key = create_composite_key("cstx", &[g, o, &seq.to_string()])?;
                writes.push((key, Some(format!("{g}/{o}/{seq}"))));
            }
        }
    }
    state.apply_system_writes(&writes);
    println!("stored {} pooled entries", writes.len());

    // Round trip: the rendered key splits back into its parts.
    let rendered = create_composite_key("cstx", &["g2", "o1", "0"])?;
    let record = split_composite_key(&rendered)?;
    println!("\n{rendered:?} -> prefix {:?}, attributes {:?}", record.prefix, record.attributes);
    assert_eq!(record.attributes, vec!["g2", "o1", "0"]);

    // Partial query by the first attribute: all of g2's entries, nothing
    // else scanned.
    let before = state.stats().entries_scanned;
    let hits = state.get_state_by_partial_composite_key("cstx", &["g2"])?;
    let cost = state.stats().entries_scanned - before;
    println!("\nquery [g2]: {} hits, {cost} entries scanned", hits.len());
    for hit in &hits {
        println!("  {:?} = {}", hit.record.attributes, hit.value);
    }
    assert_eq!(hits.len(), 6);
    assert_eq!(cost, 6);

    // Narrower partial key, narrower range.
    let before = state.stats().entries_scanned;
    let hits = state.get_state_by_partial_composite_key("cstx", &["g2", "o2"])?;
    let cost = state.stats().entries_scanned - before;
    println!("query [g2, o2]: {} hits, {cost} entries scanned", hits.len());
    assert_eq!((hits.len(), cost), (3, 3));

    // Tombstoned entries cost nothing: a state database removes them
    // physically, so a settled pool stops taxing later queries.
    let spent: Vec<_> = hits.iter().map(|h| (h.record.rendered.clone(), None)).collect();
    state.apply_system_writes(&spent);
    let before = state.stats().entries_scanned;
    let hits = state.get_state_by_partial_composite_key("cstx", &["g2"])?;
    let cost = state.stats().entries_scanned - before;
    println!("query [g2] after settling o2: {} hits, {cost} entries scanned", hits.len());
    assert_eq!((hits.len(), cost), (3, 3));
    Ok(())
}
