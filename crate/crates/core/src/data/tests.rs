use super::*;
use crate::mask::RelationMatrices;

fn spec() -> SynthSpec {
    SynthSpec::new(32, 7)
}

#[test]
fn parts_sum_to_one_and_labels_are_consistent() {
    for s in synth_generate(&spec(), 40).unwrap() {
        let n = 32 * 32;
        for px in 0..n {
            let sum: f64 = (0..5).map(|p| s.parts.channel(p)[px]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert_eq!(s.att_s[1] + s.att_s[2] + s.att_s[3], 1, "exactly one hair colour");
        assert_eq!(s.has_hat, s.att_s[5] == 1);
        assert!(s.image.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let glasses = s.parts.area_ratio(4) > 0.0;
        assert_eq!(glasses, s.att_s[4] == 1);
    }
}

#[test]
fn bald_heads_have_no_crown_hair() {
    let r = 64;
    let spec = SynthSpec::new(r, 3);
    let mut seen = 0;
    for i in 0..60 {
        let s = synth_sample(&spec, i).unwrap();
        if s.att_s[0] != 1 {
            continue;
        }
        seen += 1;
        let hair = s.parts.channel(2);
        // the central band above the face is free of hair
        for y in 0..r / 2 {
            for x in r / 2 - 5..r / 2 + 5 {
                assert_eq!(hair[y * r + x], 0.0, "sample {i} pixel ({x},{y})");
            }
        }
    }
    assert!(seen > 10);
}

#[test]
fn generation_is_reproducible_and_index_addressable() {
    let a = synth_generate(&spec(), 5).unwrap();
    let b = synth_generate(&spec(), 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(synth_sample(&spec(), 3).unwrap(), a[3]);
    let other = synth_sample(&SynthSpec { seed: 8, ..spec() }, 3).unwrap();
    assert_ne!(other.image, a[3].image);
}

#[test]
fn attribute_frequencies_are_balanced() {
    let spec = SynthSpec::new(8, 11);
    let n = 10_000;
    let mut counts = [0usize; 6];
    for i in 0..n {
        let s = synth_sample(&spec, i).unwrap();
        for (c, v) in counts.iter_mut().zip(&s.att_s) {
            *c += *v as usize;
        }
    }
    for (name, c) in SYNTH_ATTRIBUTES.iter().zip(counts) {
        let f = c as f64 / n as f64;
        assert!((0.3..=0.7).contains(&f), "{name}: {f}");
    }
}

#[test]
fn attribute_subsets_select_columns() {
    let spec = SynthSpec { attributes: vec![String::from("Wearing_Hat"), String::from("Bald")], ..spec() };
    let full = synth_sample(&SynthSpec::new(32, 7), 2).unwrap();
    let sub = synth_sample(&spec, 2).unwrap();
    assert_eq!(sub.att_s, vec![full.att_s[5], full.att_s[0]]);
    assert!(synth_sample(&SynthSpec { attributes: vec![], ..SynthSpec::new(8, 0) }, 0).is_err());
    assert!(synth_sample(&SynthSpec { attributes: vec![String::from("Smiling")], ..SynthSpec::new(8, 0) }, 0).is_err());
    assert!(synth_generate(&SynthSpec::new(8, 0), 0).is_err());
}

#[test]
fn default_relations_cover_the_synthetic_parts() {
    let rel = RelationMatrices::synthetic_default();
    assert_eq!(rel.part_names(), SYNTH_PARTS.map(String::from));
    assert_eq!(rel.attribute_names(), SYNTH_ATTRIBUTES.map(String::from));
}

#[test]
fn edit_target_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let att = vec![vec![1, 0, 1], vec![0, 0, 1]];
    let t = sample_edit_targets(&att, TargetMode::EvalFlip(0), &mut rng).unwrap();
    assert_eq!(t.diffs[0].values(), &[-1.0, 0.0, 0.0]);
    assert_eq!(t.diffs[1].values(), &[1.0, 0.0, 0.0]);
    assert_eq!(t.att_t[0], vec![0, 0, 1]);
    assert!(sample_edit_targets(&att, TargetMode::EvalFlip(3), &mut rng).is_err());
    let same = vec![vec![1, 0, 1]; 5];
    let t = sample_edit_targets(&same, TargetMode::TrainShuffle, &mut rng).unwrap();
    assert!(t.diffs.iter().all(|d| d.values().iter().all(|v| *v == 0.0)));
    assert!(sample_edit_targets(&[], TargetMode::TrainShuffle, &mut rng).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn shuffle_preserves_the_label_multiset(seed in 0u64..10_000, rows in proptest::collection::vec(proptest::collection::vec(0u8..=1, 4), 1..20)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = sample_edit_targets(&rows, TargetMode::TrainShuffle, &mut rng).unwrap();
            let mut a = rows.clone();
            let mut b = t.att_t.clone();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            for ((s, tt), d) in rows.iter().zip(&t.att_t).zip(&t.diffs) {
                for k in 0..4 {
                    prop_assert_eq!(d.values()[k], tt[k] as f64 - s[k] as f64);
                }
            }
        }
    }
}

