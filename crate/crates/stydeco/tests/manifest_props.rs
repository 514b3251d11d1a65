//! Property tests for the manifest JSONL format.

use proptest::prelude::*;
use stydeco::manifest::{DatasetManifest, DomainTag, PseudoPair};

fn pair() -> impl Strategy<Value = PseudoPair> {
    (".{1,12}", ".{1,12}", ".{1,20}", any::<u64>()).prop_map(|(pseudo, source_prompt, target_prompt, seed)| PseudoPair {
        source_path: String::new(),
        pseudo_path: pseudo,
        source_prompt,
        target_prompt,
        generator_id: "stub".into(),
        seed,
    })
}

proptest! {
    #[test]
    fn jsonl_round_trip(pairs in prop::collection::vec(pair(), 1..8), created_seed: u64) {
        let pairs = pairs
            .into_iter()
            .enumerate()
            .map(|(i, p)| PseudoPair { source_path: format!("src/{i}.png"), ..p })
            .collect();
        let m = DatasetManifest { pairs, domain_tag: DomainTag::Paired, created_seed };
        let text = m.to_jsonl().unwrap();
        prop_assert_eq!(DatasetManifest::from_jsonl(&text).unwrap(), m);
    }
}
