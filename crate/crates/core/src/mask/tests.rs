use super::*;
use proptest::prelude::*;

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| alloc::format!("{prefix}{i}")).collect()
}

fn stack(probs: Vec<f64>, p: usize, h: usize, w: usize) -> PartMaskStack {
    PartMaskStack::new(probs, names("p", p).into(), h, w).unwrap()
}

fn rel(c: usize, p: usize, plus: Vec<u8>, minus: Vec<u8>) -> RelationMatrices {
    RelationMatrices::new(names("a", c), names("p", p), plus, minus).unwrap()
}

// Scalar reference implementations, written loop by loop from the formulas.
fn oracle_ar_star(d: &[f64], plus: &[u8], minus: &[u8], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p];
    for j in 0..p {
        let mut s = 0.0;
        for (i, v) in d.iter().enumerate() {
            let pos = if *v > 0.0 { 1.0 } else { 0.0 };
            let neg = if *v < 0.0 { 1.0 } else { 0.0 };
            s += pos * plus[i * p + j] as f64 + neg * minus[i * p + j] as f64;
        }
        out[j] = if s < 1.0 { s } else { 1.0 };
    }
    out
}

fn oracle_preserved(ar: &[f64], probs: &[f64], p: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for j in 0..p {
                s += probs[j * h * w + y * w + x] * ar[j];
            }
            out[y * w + x] = 1.0 - s;
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Instance {
    c: usize,
    p: usize,
    h: usize,
    w: usize,
    probs: Vec<f64>,
    plus: Vec<u8>,
    minus: Vec<u8>,
    diff: Vec<f64>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=4, 1usize..=6, 1usize..=8, 1usize..=8).prop_flat_map(|(c, p, h, w)| {
        (
            proptest::collection::vec(0.0f64..1.0, p * h * w),
            proptest::collection::vec(0u8..=1, c * p),
            proptest::collection::vec(0u8..=1, c * p),
            proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0), Just(-1.0), -1.0f64..=1.0], c),
        )
            .prop_map(move |(mut probs, plus, minus, diff)| {
                let n = h * w;
                for px in 0..n {
                    let s: f64 = (0..p).map(|j| probs[j * n + px]).sum::<f64>() + 1e-3;
                    for j in 0..p {
                        probs[j * n + px] = (probs[j * n + px] + 1e-3 / p as f64) / s;
                    }
                }
                Instance { c, p, h, w, probs, plus, minus, diff }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_scalar_oracles(inst in instance()) {
        let r = rel(inst.c, inst.p, inst.plus.clone(), inst.minus.clone());
        let parts = stack(inst.probs.clone(), inst.p, inst.h, inst.w);
        let d = AttDiff::new(inst.diff.clone()).unwrap();
        let ar = compute_ar_star(&d, &r).unwrap();
        let want_ar = oracle_ar_star(&inst.diff, &inst.plus, &inst.minus, inst.p);
        for (a, b) in ar.iter().zip(&want_ar) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
        let keep = preserved_mask(&d, &parts, &r).unwrap();
        let want = oracle_preserved(&want_ar, &inst.probs, inst.p, inst.h, inst.w);
        for (a, b) in keep.map.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
        for i in 0..inst.c {
            for dir in [Direction::Strengthen, Direction::Weaken] {
                let mut e = vec![0.0; inst.c];
                e[i] = dir.sign();
                let ar_e = oracle_ar_star(&e, &inst.plus, &inst.minus, inst.p);
                let want_inf: Vec<f64> = oracle_preserved(&ar_e, &inst.probs, inst.p, inst.h, inst.w)
                    .into_iter().map(|v| 1.0 - v).collect();
                let got = influence_region(i, dir, &parts, &r).unwrap();
                for (a, b) in got.map.iter().zip(&want_inf) {
                    prop_assert!((a - b).abs() <= 1e-6);
                }
                // complementarity holds exactly, not just within tolerance
                let keep_e = preserved_mask(&AttDiff::new(e).unwrap(), &parts, &r).unwrap();
                for (a, b) in got.map.iter().zip(&keep_e.map) {
                    prop_assert_eq!(a + b, 1.0);
                }
            }
        }
    }

    #[test]
    fn flipping_more_attributes_never_grows_the_preserved_mask(inst in instance(), extra in 0usize..4, sign in prop_oneof![Just(1.0), Just(-1.0)]) {
        let r = rel(inst.c, inst.p, inst.plus, inst.minus);
        let parts = stack(inst.probs, inst.p, inst.h, inst.w);
        let base = AttDiff::new(inst.diff.clone()).unwrap();
        let mut more = inst.diff.clone();
        let k = extra % inst.c;
        if more[k] == 0.0 {
            more[k] = sign;
        }
        let a = preserved_mask(&base, &parts, &r).unwrap();
        let b = preserved_mask(&AttDiff::new(more).unwrap(), &parts, &r).unwrap();
        for (x, y) in a.map.iter().zip(&b.map) {
            prop_assert!(y <= x);
        }
    }

    #[test]
    fn resized_stacks_stay_normalized(inst in instance(), th in 1usize..12, tw in 1usize..12) {
        let parts = stack(inst.probs, inst.p, inst.h, inst.w);
        let r = parts.resized(th, tw).unwrap();
        for px in 0..th * tw {
            let s: f64 = (0..r.parts()).map(|j| r.channel(j)[px]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-4);
        }
    }
}

#[test]
fn ar_star_examples() {
    let r = rel(2, 3, vec![1, 0, 0, 0, 1, 1], vec![1, 1, 0, 0, 0, 1]);
    let got = compute_ar_star(&AttDiff::new(vec![1.0, -1.0]).unwrap(), &r).unwrap();
    assert_eq!(got, vec![1.0, 0.0, 1.0]);
    assert_eq!(compute_ar_star(&AttDiff::zeros(2), &r).unwrap(), vec![0.0; 3]);
    assert!(matches!(compute_ar_star(&AttDiff::zeros(3), &r), Err(Error::Dim { .. })));
}

#[test]
fn bald_strengthen_selects_hair() {
    let r = RelationMatrices::synthetic_default();
    let d = AttDiff::one_hot(6, 0, 1.0).unwrap();
    assert_eq!(compute_ar_star(&d, &r).unwrap(), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn preserved_examples() {
    let r = rel(2, 3, vec![1, 0, 0, 0, 1, 1], vec![1, 1, 0, 0, 0, 1]);
    let parts = stack(vec![0.5, 0.3, 0.2], 3, 1, 1);
    let m = preserved_mask(&AttDiff::new(vec![1.0, -1.0]).unwrap(), &parts, &r).unwrap();
    assert!((m.map[0] - 0.3).abs() < 1e-12);
    let zero = preserved_mask(&AttDiff::zeros(2), &parts, &r).unwrap();
    assert_eq!(zero.map, vec![1.0]);
    // every selected part: fully editable
    let full = stack(vec![0.6, 0.0, 0.4], 3, 1, 1);
    let m = preserved_mask(&AttDiff::new(vec![1.0, -1.0]).unwrap(), &full, &r).unwrap();
    assert_eq!(m.map, vec![0.0]);
}

#[test]
fn influence_examples() {
    let r = RelationMatrices::from_lists(
        &["background", "skin", "hair"],
        &[("Pale_Skin", &["skin"], &["skin"]), ("Bald", &["hair"], &["background", "skin"]), ("None", &[], &[])],
    )
    .unwrap();
    let parts = stack(vec![0.6, 0.2, 0.1, 0.5, 0.3, 0.3], 3, 1, 2);
    for dir in [Direction::Strengthen, Direction::Weaken] {
        let inf = influence_region(0, dir, &parts, &r).unwrap();
        for (a, b) in inf.map.iter().zip(parts.channel(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(influence_region(2, Direction::Weaken, &parts, &r).unwrap().map, vec![0.0, 0.0]);
    let weak = influence_region(1, Direction::Weaken, &parts, &r).unwrap();
    assert!((weak.map[0] - 0.7).abs() < 1e-12);
    assert!(matches!(influence_region(3, Direction::Weaken, &parts, &r), Err(Error::Index { .. })));
}

#[test]
fn resize_examples() {
    let m: Vec<f64> = (0..12).map(|v| v as f64 * 0.37).collect();
    assert_eq!(resize_map(&m, (3, 4), (3, 4), Filter::Bilinear).unwrap(), m);
    let c = resize_map(&[0.25; 4], (2, 2), (7, 5), Filter::Bilinear).unwrap();
    assert!(c.iter().all(|v| *v == 0.25));
    let checker = resize_map(&[0.0, 1.0, 1.0, 0.0], (2, 2), (1, 1), Filter::Bilinear).unwrap();
    assert_eq!(checker, vec![0.5]);
    assert!(resize_map(&m, (3, 4), (0, 2), Filter::Bilinear).is_err());
    let near = resize_map(&[1.0, 2.0, 3.0, 4.0], (2, 2), (4, 4), Filter::Nearest).unwrap();
    assert_eq!(&near[..4], &[1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn mre_examples() {
    let r = rel(1, 2, vec![1, 0], vec![1, 0]);
    let parts = stack(vec![0.25, 0.75], 2, 1, 1);
    let x = Image::filled(3, 1, 1, 0.1);
    let items = [MreItem { image: &x, attributes: &[0], parts: &parts }];
    let shifted = |im: &Image, d: &[AttDiff], _: &PartMaskStack| -> Result<Vec<Image>> {
        Ok(d.iter().map(|_| Image { data: im.data.iter().map(|v| v + 0.8).collect(), ..im.clone() }).collect())
    };
    let got = mre_metric(shifted, &items, &r).unwrap();
    assert!((got - 1.8).abs() < 1e-12);
    let identity = |im: &Image, d: &[AttDiff], _: &PartMaskStack| Ok(vec![im.clone(); d.len()]);
    assert_eq!(mre_metric(identity, &items, &r).unwrap(), 0.0);
    assert!(matches!(mre_metric(identity, &[], &r), Err(Error::Empty(_))));
}

#[test]
fn mre_ignores_fully_editable_pixels() {
    let r = rel(1, 2, vec![1, 0], vec![1, 0]);
    let parts = stack(vec![1.0, 0.0, 0.0, 1.0], 2, 1, 2);
    let x = Image::filled(3, 1, 2, 0.0);
    let items = [MreItem { image: &x, attributes: &[1], parts: &parts }];
    let touch_first = |im: &Image, d: &[AttDiff], _: &PartMaskStack| -> Result<Vec<Image>> {
        let mut o = im.clone();
        for c in 0..3 {
            o.data[c * 2] = 0.9;
        }
        Ok(vec![o; d.len()])
    };
    assert_eq!(mre_metric(touch_first, &items, &r).unwrap(), 0.0);
}

#[test]
fn rejects_bad_inputs() {
    assert!(AttDiff::new(vec![1.5]).is_err());
    assert!(AttDiff::new(vec![f64::NAN]).is_err());
    assert!(RelationMatrices::new(names("a", 1), names("p", 1), vec![2], vec![0]).is_err());
    assert!(PartMaskStack::new(vec![0.5, 0.4], names("p", 2).into(), 1, 1).is_err());
}
