//! Slow, direct reference implementations.

use bfpcnn::preprocess::{histogram_equalize, median_filter, resize, GrayImage};
use bfpcnn::train::{compute_metrics, confusion_matrix, ConfusionMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random image up to 32x32. Some draw from a handful of levels so that
/// histograms have gaps and heavy ties.
pub fn random_image(rng: &mut ChaCha8Rng) -> GrayImage {
    let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
    let levels: Vec<u8> = (0..rng.gen_range(1..=6)).map(|_| rng.gen()).collect();
    let sparse = rng.gen_bool(0.3);
    let pixels = (0..h * w).map(|_| if sparse { levels[rng.gen_range(0..levels.len())] } else { rng.gen() }).collect();
    GrayImage::new(h, w, pixels).unwrap()
}

/// Equalization evaluated pixel by pixel: the CDF of a pixel is the share of
/// pixels not brighter than it.
pub fn equalize_oracle(img: &GrayImage) -> Vec<u8> {
    let px = img.pixels();
    let n = px.len() as f64;
    let cdf = |p: u8| px.iter().filter(|&&q| q <= p).count() as f64 / n;
    let darkest = *px.iter().min().unwrap();
    let (lo, hi) = (cdf(darkest), 1.0);
    if hi == lo {
        return px.to_vec();
    }
    px.iter().map(|&p| ((cdf(p) - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Median by sorting the clamped neighbourhood.
pub fn median_oracle(img: &GrayImage, window: usize) -> Vec<u8> {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let r = window as i64 / 2;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut hood: Vec<u8> = (-r..=r)
                .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| img.get((y + dy).clamp(0, h - 1) as usize, (x + dx).clamp(0, w - 1) as usize))
                .collect();
            hood.sort_unstable();
            out.push(hood[hood.len() / 2]);
        }
    }
    out
}

/// `floor(i / (target / extent))` as the last source index `y` with `y / s <= i`.
fn floor_index(i: usize, extent: usize, target: usize) -> usize {
    (0..extent).filter(|&y| y * target <= i * extent).count() - 1
}

pub fn resize_oracle(img: &GrayImage, target: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for i in 0..target {
        for j in 0..target {
            out.push(img.get(floor_index(i, img.height(), target), floor_index(j, img.width(), target)));
        }
    }
    out
}

/// Compare the three kernels with their oracles on `count` random images.
/// Returns the number of comparisons made.
pub fn preprocessing_suite(seed: u64, count: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hand = GrayImage::new(2, 2, vec![10, 10, 20, 20]).unwrap();
    if histogram_equalize(&hand).pixels() != [0, 0, 255, 255] || equalize_oracle(&hand) != [0, 0, 255, 255] {
        return Err("[10,10,20,20] does not equalize to [0,0,255,255]".into());
    }
    let mut checks = 1;
    for k in 0..count {
        let img = random_image(&mut rng);
        if histogram_equalize(&img).pixels() != equalize_oracle(&img).as_slice() {
            return Err(format!("equalize mismatch on image {k} ({}x{})", img.height(), img.width()));
        }
        for window in [1, 3, 5] {
            if median_filter(&img, window).map_err(|e| e.to_string())?.pixels() != median_oracle(&img, window).as_slice() {
                return Err(format!("median {window} mismatch on image {k}"));
            }
        }
        for target in [1, 2, 7, img.height(), 2 * img.width() + 1, 40] {
            if resize(&img, target).map_err(|e| e.to_string())?.pixels() != resize_oracle(&img, target).as_slice() {
                return Err(format!("resize to {target} mismatch on image {k}"));
            }
        }
        checks += 10;
    }
    Ok(checks)
}

/// Precision, recall and F1 of class `c` counted straight from the pairs.
pub fn direct_scores(preds: &[usize], labels: &[usize], c: usize) -> (f64, f64, f64) {
    let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
    let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
    let actual = labels.iter().filter(|&&l| l == c).count() as f64;
    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    let recall = if actual > 0.0 { tp / actual } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    (precision, recall, f1)
}

/// `compute_metrics` against direct counts on `count` random label sets, plus
/// the binary hand case. Returns the largest deviation seen.
pub fn metrics_suite(seed: u64, count: usize) -> Result<f64, String> {
    const TOL: f64 = 1e-12;
    let mut worst = 0.0f64;
    let mut check = |what: String, got: f64, want: f64| -> Result<(), String> {
        let d = (got - want).abs();
        worst = worst.max(d);
        if d > TOL {
            return Err(format!("{what}: {got} vs {want}"));
        }
        Ok(())
    };

    let hand = compute_metrics(&ConfusionMatrix::from_counts(&[vec![5, 1], vec![2, 4]]).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    check("hand accuracy".into(), hand.accuracy, 0.75)?;
    check("hand precision".into(), hand.precision[0], 5.0 / 7.0)?;
    check("hand recall".into(), hand.recall[0], 5.0 / 6.0)?;
    check("hand f1".into(), hand.f1[0], 10.0 / 13.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..count {
        let classes = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=200);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        // mostly right, sometimes a random class, so some classes go unpredicted
        let preds: Vec<usize> = labels.iter().map(|&l| if rng.gen_bool(0.6) { l } else { rng.gen_range(0..classes) }).collect();
        let cm = confusion_matrix(&preds, &labels, classes).map_err(|e| e.to_string())?;
        if cm.total() != n as u64 {
            return Err(format!("matrix {k} holds {} of {n} samples", cm.total()));
        }
        let m = compute_metrics(&cm).map_err(|e| e.to_string())?;
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / n as f64;
        check(format!("accuracy {k}"), m.accuracy, correct)?;
        check(format!("micro precision {k}"), m.micro_precision, m.accuracy)?;
        check(format!("micro recall {k}"), m.micro_recall, m.accuracy)?;
        let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
        for c in 0..classes {
            let (p, r, f) = direct_scores(&preds, &labels, c);
            check(format!("precision {k}/{c}"), m.precision[c], p)?;
            check(format!("recall {k}/{c}"), m.recall[c], r)?;
            check(format!("f1 {k}/{c}"), m.f1[c], f)?;
            (mp, mr, mf) = (mp + p, mr + r, mf + f);
        }
        let k_f = classes as f64;
        check(format!("macro precision {k}"), m.macro_precision, mp / k_f)?;
        check(format!("macro recall {k}"), m.macro_recall, mr / k_f)?;
        check(format!("macro f1 {k}"), m.macro_f1, mf / k_f)?;
    }
    Ok(worst)
}
