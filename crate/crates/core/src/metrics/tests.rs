use super::*;
use crate::mask::PartMaskStack;
use alloc::sync::Arc;
use proptest::prelude::*;

fn pattern(shift: f64, amp: f64, wobble: f64) -> Image {
    let (h, w) = (16, 16);
    let data = (0..h * w)
        .map(|k| {
            let (y, x) = ((k / w) as f64, (k % w) as f64);
            libm::sin(0.7 * x + 0.3 * y + shift) * amp + wobble * libm::cos(1.3 * x * y)
        })
        .collect();
    Image::new(1, h, w, data).unwrap()
}

#[test]
fn psnr_examples() {
    let a = Image::filled(3, 4, 4, 100.0);
    assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_SATURATION);
    let b = Image::filled(3, 4, 4, 105.0);
    let v = psnr(&a, &b, 255.0).unwrap();
    let want = 10.0 * libm::log10(65025.0 / 25.0);
    assert!((v - want).abs() < 1e-12);
    assert!((v - 34.15).abs() < 0.01);
    // halving the MSE adds 10 log10 2
    let c = Image::filled(3, 4, 4, 100.0 + 5.0 / libm::sqrt(2.0));
    let gain = psnr(&a, &c, 255.0).unwrap() - v;
    assert!((gain - 10.0 * libm::log10(2.0)).abs() < 1e-9);
    assert!(psnr(&a, &Image::filled(3, 2, 2, 0.0), 255.0).is_err());
}

#[test]
fn ssim_examples() {
    let k = SsimConstants::for_range(1.0);
    assert_eq!((k.c1, k.c2), (1e-4, 9e-4));
    let a = Image::filled(3, 4, 4, 0.2);
    let b = Image::filled(3, 4, 4, 0.4);
    let want = (2.0 * 0.2 * 0.4 + 1e-4) / (0.2 * 0.2 + 0.4 * 0.4 + 1e-4);
    let got = ssim(&a, &b, k, SsimMode::Global).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!((got - 0.8001).abs() < 1e-3);
    let p = pattern(0.0, 0.8, 0.0);
    assert_eq!(ssim(&p, &p, k, SsimMode::Global).unwrap(), 1.0);
}

#[test]
fn ssim_matches_reference_values() {
    // frozen from an independent NumPy / scikit-image evaluation of the same images
    let a = pattern(0.0, 0.8, 0.0);
    let b = pattern(0.4, 0.6, 0.05);
    let k = SsimConstants::for_range(2.0);
    assert!((ssim(&a, &b, k, SsimMode::Global).unwrap() - 0.8224437430582888).abs() < 1e-9);
    assert!((ssim(&a, &b, k, SsimMode::Windowed).unwrap() - 0.5086964147053659).abs() < 1e-9);
}

#[test]
fn fid_examples() {
    let k: Vec<f64> = (0..20).map(|v| v as f64).collect();
    let feats = |f: &dyn Fn(f64) -> [f64; 3]| k.iter().map(|v| f(*v).to_vec()).collect::<Vec<_>>();
    let real = feats(&|v| [libm::sin(v), libm::cos(2.0 * v), libm::sin(0.5 * v) * v / 10.0]);
    let fake = feats(&|v| [libm::sin(v) + 0.3, libm::cos(2.0 * v) * 1.5, libm::sin(0.5 * v + 1.0) * v / 10.0 + 0.1 * libm::cos(v)]);
    assert!(fid(&real, &real).unwrap().abs() < 1e-6);
    // frozen from a SciPy sqrtm evaluation
    assert!((fid(&real, &fake).unwrap() - 0.26566072634046684).abs() < 1e-4);
    let a = fid(&real, &fake).unwrap();
    let b = fid(&fake, &real).unwrap();
    assert!((a - b).abs() < 1e-6);
    let shift = |s: &[Vec<f64>]| s.iter().map(|v| v.iter().zip([1.0, -2.0, 0.5]).map(|(x, d)| x + d).collect()).collect::<Vec<Vec<f64>>>();
    assert!((fid(&shift(&real), &shift(&fake)).unwrap() - a).abs() < 1e-6);

    let h = libm::sqrt(0.5);
    let one = vec![vec![-h], vec![h]];
    let three = vec![vec![3.0 - h], vec![3.0 + h]];
    assert!((fid(&one, &three).unwrap() - 9.0).abs() < 1e-6);
    let m1 = DVector::from_vec(vec![0.0]);
    let m2 = DVector::from_vec(vec![3.0]);
    let s = DMatrix::from_vec(1, 1, vec![1.0]);
    assert!((fid_from_stats(&m1, &s, &m2, &s).unwrap() - 9.0).abs() < 1e-6);
    assert!(fid(&one[..1], &three).is_err());
}

#[test]
fn singular_covariances_are_regularized() {
    let a: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64, 0.0, 0.0, 0.0]).collect();
    let v = fid(&a, &a).unwrap();
    assert!(v.is_finite() && v.abs() < 1e-6);
}

fn stack1() -> PartMaskStack {
    PartMaskStack::new(vec![1.0], Arc::from(vec![String::from("all")]), 1, 1).unwrap()
}

#[test]
fn identity_editor_never_registers_flips() {
    let parts = stack1();
    let imgs: Vec<Image> = (0..4).map(|i| Image::filled(3, 1, 1, i as f64 * 0.1)).collect();
    let labels = [[1u8, 0], [0, 0], [1, 1], [0, 1]];
    let items: Vec<EvalItem<'_>> = imgs.iter().zip(&labels).map(|(im, l)| EvalItem { image: im, attributes: l, parts: &parts }).collect();
    let lookup = |im: &Image| labels[(im.data[0] * 10.0 + 0.5) as usize].to_vec();
    let identity = |im: &Image, d: &[AttDiff], _: &PartMaskStack| Ok(vec![im.clone(); d.len()]);
    let classify = |ims: &[Image]| Ok(ims.iter().map(lookup).collect());
    let acc = editing_accuracy(identity, classify, &items).unwrap();
    assert_eq!(acc, vec![0.0, 0.0]);
    // an oracle editor that writes the flipped label into the pixel value
    let mut calls = 0;
    let perfect = |im: &Image, d: &[AttDiff], _: &PartMaskStack| {
        calls += 1;
        Ok(d.iter().map(|_| im.clone()).collect())
    };
    let flip_classify = |ims: &[Image]| {
        Ok(ims
            .iter()
            .enumerate()
            .map(|(i, im)| lookup(im).iter().enumerate().map(|(j, v)| if i == j { 1 - v } else { *v }).collect())
            .collect())
    };
    assert_eq!(editing_accuracy(perfect, flip_classify, &items).unwrap(), vec![1.0, 1.0]);
    assert_eq!(calls, 4);
    assert!(editing_accuracy(identity, classify, &[]).is_err());
}

#[test]
fn area_split_uses_strict_threshold() {
    let names: Arc<[String]> = Arc::from(vec![String::from("hat"), String::from("rest")]);
    let big = PartMaskStack::new(vec![0.2, 0.0, 0.8, 1.0], names.clone(), 1, 2).unwrap();
    let edge = PartMaskStack::new(vec![0.1, 0.1, 0.9, 0.9], names, 1, 2).unwrap();
    let im = Image::filled(3, 1, 2, 0.0);
    let items = [EvalItem { image: &im, attributes: &[0], parts: &big }, EvalItem { image: &im, attributes: &[0], parts: &edge }];
    let (with, without) = split_by_area(&items, 0, 0.1);
    assert_eq!((with.len(), without.len()), (0, 2));
    let (with, _) = split_by_area(&items, 0, 0.09);
    assert_eq!(with.len(), 2);
}

#[test]
fn report_keys_are_flat_and_ordered() {
    let r = EvalReport {
        subgroup: String::from("all"),
        samples: 3,
        mre: 0.01,
        psnr_mean: 30.0,
        ssim_mean: 0.9,
        attribute_names: vec![String::from("Bald")],
        per_attribute_accuracy: vec![0.5],
        avg_accuracy: 0.5,
        fid: None,
        fid_embedder: None,
    };
    let keys: Vec<String> = r.key_values().into_iter().map(|(k, _)| k).collect();
    assert_eq!(keys, ["subgroup", "samples", "MRE", "FID", "FID_embedder", "Avg_Acc", "PSNR", "SSIM", "acc_Bald"]);
}

proptest! {
    #[test]
    fn psnr_decreases_with_mse(d1 in 0.001f64..1.0, extra in 0.001f64..1.0) {
        let a = Image::filled(1, 2, 2, 0.0);
        let p1 = psnr(&a, &Image::filled(1, 2, 2, d1), 2.0).unwrap();
        let p2 = psnr(&a, &Image::filled(1, 2, 2, d1 + extra), 2.0).unwrap();
        prop_assert!(p2 < p1);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(xs in proptest::collection::vec(-1.0f64..1.0, 48), ys in proptest::collection::vec(-1.0f64..1.0, 48)) {
        let a = Image::new(3, 4, 4, xs).unwrap();
        let b = Image::new(3, 4, 4, ys).unwrap();
        let k = SsimConstants::for_range(2.0);
        for mode in [SsimMode::Global, SsimMode::Windowed] {
            let ab = ssim(&a, &b, k, mode).unwrap();
            let ba = ssim(&b, &a, k, mode).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn accuracy_ignores_dataset_order(seed in 0u64..1000) {
        let parts = stack1();
        let imgs: Vec<Image> = (0..6).map(|i| Image::filled(3, 1, 1, i as f64)).collect();
        let labels: Vec<[u8; 2]> = (0..6).map(|i| [((seed >> i) & 1) as u8, ((seed >> (i + 6)) & 1) as u8]).collect();
        let mut items: Vec<EvalItem<'_>> = imgs.iter().zip(&labels).map(|(im, l)| EvalItem { image: im, attributes: l, parts: &parts }).collect();
        let edit = |im: &Image, d: &[AttDiff], _: &PartMaskStack| Ok(vec![im.clone(); d.len()]);
        let classify = |ims: &[Image]| Ok(ims.iter().map(|im| vec![(im.data[0] as u64 % 2) as u8, ((im.data[0] as u64 / 2) % 2) as u8]).collect());
        let a = editing_accuracy(edit, classify, &items).unwrap();
        items.reverse();
        items.swap(1, 4);
        let b = editing_accuracy(edit, classify, &items).unwrap();
        prop_assert_eq!(a, b);
    }
}
