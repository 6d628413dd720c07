//! GrabCut against exhaustive search on tiny images.

use coseg_core::grabcut::{energy, grabcut_traced, GrabcutConfig, Neighborhood, Smoothness};
use coseg_core::{BinaryMask, ImageGrid, SeededRng, Trimap, TrimapLabel};

fn brute_min(img: &ImageGrid, t: &Trimap, fg: &coseg_core::grabcut::GmmModel, bg: &coseg_core::grabcut::GmmModel, s: &Smoothness) -> f64 {
    let n = img.data().len();
    let free: Vec<usize> = (0..n).filter(|&p| !t.labels()[p].is_definite()).collect();
    let mut best = f64::INFINITY;
    for bits in 0u32..1 << free.len() {
        let mut l: Vec<u8> = t.labels().iter().map(|x| (*x == TrimapLabel::DefiniteFg) as u8).collect();
        for (k, &p) in free.iter().enumerate() {
            l[p] = (bits >> k & 1) as u8;
        }
        best = best.min(energy(img, t, &BinaryMask::new(img.width(), img.height(), l).unwrap(), fg, bg, s));
    }
    best
}

#[test]
fn final_cut_is_globally_optimal_for_final_models() {
    use TrimapLabel::*;
    for case in 0..20u64 {
        let mut rng = SeededRng::new(case);
        let (w, h) = (3 + case as usize % 2, 4);
        let img = ImageGrid::from_fn(w, h, |_, _| if rng.uniform() < 0.5 { 0.2 } else { 0.8 } + 0.05 * rng.normal());
        let mut labels: Vec<TrimapLabel> = (0..w * h).map(|_| [ProbableBg, ProbableFg][rng.below(2)]).collect();
        labels[0] = DefiniteBg;
        labels[w * h - 1] = DefiniteFg;
        let t = Trimap::new(w, h, labels).unwrap();
        for nb in [Neighborhood::Four, Neighborhood::Eight] {
            let cfg = GrabcutConfig { gmm_components: 2, iterations: 3, neighborhood: nb, ..GrabcutConfig::default() };
            let res = grabcut_traced(&img, &t, &cfg, &mut rng.fork(9)).unwrap();
            let s = Smoothness::new(&img, cfg.gamma, cfg.neighborhood);
            let got = energy(&img, &t, &res.mask, &res.fg_model, &res.bg_model, &s);
            let best = brute_min(&img, &t, &res.fg_model, &res.bg_model, &s);
            assert!((got - best).abs() <= 1e-9 * best.abs().max(1.0), "case {case}: {got} vs {best}");
            assert_eq!(*res.energies.last().unwrap(), got);
        }
    }
}
