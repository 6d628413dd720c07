//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits non-zero on failures only when `ACCEPTANCE_STRICT=1`, so the
//! trend-level phantom results are reported without breaking `cargo test`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use coseg_core::cluster::{kmeans_traced, LesionFeature};
use coseg_core::crf::{meanfield_refine, meanfield_trace, refine_probability, unary_from_prob, CrfParams, UnaryField};
use coseg_core::grabcut::{energy, grabcut_traced, max_flow_min_cut, FlowGraph, GrabcutConfig, Smoothness};
use coseg_core::metrics::{averaged_hausdorff, confusion, AvdMode};
use coseg_core::nn::gradcheck::{check_operator, check_pair_network, operator_cases};
use coseg_core::nn::{AttentionKind, CosegNet, EncoderVariant, Init, NetConfig, Tensor};
use coseg_core::phantom::generate;
use coseg_core::pipeline::lesion::Roi;
use coseg_core::pipeline::{artifacts, Evaluation, Pipeline, PipelineConfig};
use coseg_core::{BinaryMask, ImageGrid, SeededRng, Trimap, TrimapLabel};

type Outcome = (bool, String);

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        println!("{} [{n}] {name}: {} ({secs:.1}s)", if out.0 { "PASS" } else { "FAIL" }, out.1);
        results.push((n, name, out, secs));
    };

    record(1, "max-flow exactness", &mut || timed(maxflow_exactness(), 10.0));
    record(2, "grabcut oracle", &mut || timed(grabcut_oracle(), 30.0));
    record(3, "gradient checks", &mut || timed(gradient_checks(), 120.0));
    record(4, "siamese symmetry", &mut siamese_symmetry);
    record(5, "mean-field correctness", &mut meanfield_correctness);
    record(6, "metric oracles", &mut metric_oracles);

    let runs = PhantomRuns::new();
    record(7, "phantom end-to-end trend", &mut || runs.trend());
    record(8, "determinism", &mut || runs.determinism());
    record(9, "k-means", &mut || kmeans_checks(&runs));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2 .0).map(|r| r.0).collect();
    println!("{} of {} criteria passed ({:.0}s)", results.len() - failed.len(), results.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}

/// Wraps an outcome measured against a runtime budget.
fn timed(f: (Outcome, f64), budget: f64) -> Outcome {
    let ((ok, msg), secs) = f;
    (ok && secs < budget, format!("{msg}, {secs:.1}s of {budget:.0}s budget"))
}

fn measure(f: impl FnOnce() -> Outcome) -> (Outcome, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

// ---------------------------------------------------------------- 1

fn brute_cut(g: &FlowGraph) -> f64 {
    let n = g.node_count;
    let mut best = f64::INFINITY;
    for bits in 0u32..1 << n {
        let src = |p: usize| bits >> p & 1 == 1;
        let mut c = 0.0;
        for p in 0..n {
            c += if src(p) { g.sink_caps[p] } else { g.source_caps[p] };
        }
        for &(i, j, w) in &g.edges {
            if src(i) != src(j) {
                c += w;
            }
        }
        best = best.min(c);
    }
    best
}

fn maxflow_exactness() -> (Outcome, f64) {
    measure(|| {
        let mut rng = SeededRng::new(1001);
        let mut bad = 0;
        for _ in 0..100 {
            // two terminals plus at most ten pixel nodes
            let n = 1 + rng.below(10);
            let mut g = FlowGraph::new(n);
            for p in 0..n {
                g.source_caps[p] = rng.below(20) as f64;
                g.sink_caps[p] = rng.below(20) as f64;
            }
            for i in 0..n {
                for j in i + 1..n {
                    if rng.uniform() < 0.5 {
                        g.edges.push((i, j, rng.below(15) as f64));
                    }
                }
            }
            let cut = max_flow_min_cut(&g).expect("valid graph");
            let best = brute_cut(&g);
            if cut.flow != best || g.cut_cost(&cut.source_side) != best {
                bad += 1;
            }
        }
        (bad == 0, format!("{bad}/100 graphs differ from enumeration"))
    })
}

// ---------------------------------------------------------------- 2

fn grabcut_oracle() -> (Outcome, f64) {
    measure(|| {
        use TrimapLabel::*;
        let mut worst: f64 = 0.0;
        let mut bad = 0;
        for case in 0..50u64 {
            let mut rng = SeededRng::new(2000 + case);
            let (lo, hi) = (rng.uniform_range(0.0, 0.4), rng.uniform_range(0.6, 1.0));
            let bright: Vec<bool> = (0..16).map(|_| rng.uniform() < 0.5).collect();
            let img = ImageGrid::new(4, 4, bright.iter().map(|&b| if b { hi } else { lo }).collect()).unwrap();
            let mut labels: Vec<TrimapLabel> = (0..16)
                .map(|_| match rng.below(6) {
                    0 => DefiniteBg,
                    1 => DefiniteFg,
                    2 | 3 => ProbableBg,
                    _ => ProbableFg,
                })
                .collect();
            labels[rng.below(8)] = DefiniteBg;
            labels[8 + rng.below(8)] = DefiniteFg;
            let trimap = Trimap::new(4, 4, labels).unwrap();
            let cfg = GrabcutConfig { gmm_components: 2, ..GrabcutConfig::default() };
            let res = grabcut_traced(&img, &trimap, &cfg, &mut rng.fork(1)).expect("grabcut runs");
            let smooth = Smoothness::new(&img, cfg.gamma, cfg.neighborhood);
            let got = energy(&img, &trimap, &res.mask, &res.fg_model, &res.bg_model, &smooth);
            let free: Vec<usize> = (0..16).filter(|&p| !trimap.labels()[p].is_definite()).collect();
            let mut best = f64::INFINITY;
            for bits in 0u32..1 << free.len() {
                let mut l: Vec<u8> = trimap.labels().iter().map(|t| (*t == DefiniteFg) as u8).collect();
                for (k, &p) in free.iter().enumerate() {
                    l[p] = (bits >> k & 1) as u8;
                }
                let m = BinaryMask::new(4, 4, l).unwrap();
                best = best.min(energy(&img, &trimap, &m, &res.fg_model, &res.bg_model, &smooth));
            }
            let rel = (got - best).abs() / best.abs().max(1.0);
            worst = worst.max(rel);
            if rel > 1e-9 {
                bad += 1;
            }
        }
        (bad == 0, format!("{bad}/50 above brute-force minimum, worst relative gap {worst:.1e}"))
    })
}

// ---------------------------------------------------------------- 3, 4

fn tiny_net(attention: AttentionKind) -> NetConfig {
    NetConfig { variant: EncoderVariant::DrnS, stem_width: 2, widths: [2, 3, 3, 4], decoder_width: 3, attention, output_stride: 16 }
}

fn randomize(net: &mut CosegNet, rng: &mut SeededRng) {
    let store = net.params_mut();
    for id in 0..store.len() {
        let std = match store.init(id) {
            Init::HeFanIn(fan_in) => (2.0 / fan_in as f64).sqrt(),
            Init::Zeros => 0.1,
        };
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.normal() * std);
    }
}

fn batch(n: usize, size: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::new(vec![n, 1, size, size], (0..n * size * size).map(|_| rng.uniform()).collect()).unwrap()
}

fn gradient_checks() -> (Outcome, f64) {
    measure(|| {
        let mut worst_op: (f64, &str) = (0.0, "");
        let mut ops = 0;
        let rng = SeededRng::new(3000);
        for draw in 0..5 {
            for case in operator_cases(&mut rng.fork(draw)) {
                let name = case.name;
                let e = check_operator(case.inputs, case.op, 1e-3);
                ops += 1;
                if e > worst_op.0 {
                    worst_op = (e, name);
                }
            }
        }
        let mut worst_net: f64 = 0.0;
        for draw in 0..5 {
            let mut r = SeededRng::new(3100 + draw);
            let mut net = CosegNet::new(tiny_net(AttentionKind::ChannelSpatial), &mut r).unwrap();
            randomize(&mut net, &mut r);
            let (a, b) = (batch(1, 16, &mut r), batch(1, 16, &mut r));
            let ta: Vec<u8> = (0..256).map(|_| (r.uniform() < 0.4) as u8).collect();
            let tb: Vec<u8> = (0..256).map(|_| (r.uniform() < 0.6) as u8).collect();
            for c in check_pair_network(&mut net, &a, &b, &ta, &tb, 1e-3).unwrap() {
                worst_net = worst_net.max(c.rel_error);
            }
        }
        let ok = worst_op.0 <= 1e-3 && worst_net <= 1e-3;
        (ok, format!("{ops} operator checks worst {:.1e} ({}), network worst {worst_net:.1e}", worst_op.0, worst_op.1))
    })
}

fn siamese_symmetry() -> Outcome {
    let mut bad = 0;
    for draw in 0..20u64 {
        let mut rng = SeededRng::new(4000 + draw);
        let attention = [AttentionKind::Channel, AttentionKind::ChannelSpatial][draw as usize % 2];
        let mut net = CosegNet::new(tiny_net(attention), &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        let (a, b) = (batch(2, 16, &mut rng), batch(2, 16, &mut rng));
        let (pa, pb) = net.predict_pair(&a, &b).unwrap();
        let (qb, qa) = net.predict_pair(&b, &a).unwrap();
        let (sa, sb) = net.predict_pair(&a, &a).unwrap();
        if pa != qa || pb != qb || sa != sb {
            bad += 1;
        }
    }
    (bad == 0, format!("{bad}/20 draws not bit-exact"))
}

// ---------------------------------------------------------------- 5

fn random_field(w: usize, h: usize, rng: &mut SeededRng) -> (ImageGrid, UnaryField) {
    let img = ImageGrid::from_fn(w, h, |_, _| rng.uniform());
    let prob = ImageGrid::from_fn(w, h, |_, _| rng.uniform());
    (img, unary_from_prob(&prob))
}

fn meanfield_correctness() -> Outcome {
    let mut rng = SeededRng::new(5000);
    let mut argmax_bad = 0;
    for i in 0..100 {
        let (img, u) = random_field(8 + i % 5, 6 + i % 7, &mut rng);
        let p = CrfParams { w_app: 0.0, w_smooth: 0.0, iterations: 1 + i % 5, ..CrfParams::default() };
        let out = meanfield_refine(&img, &u, &p).unwrap();
        let oracle = BinaryMask::from_fn(u.width(), u.height(), |x, y| {
            let c = u.costs()[y * u.width() + x];
            c[1] < c[0]
        });
        if out.mask != oracle {
            argmax_bad += 1;
        }
    }

    let img = ImageGrid::new(2, 1, vec![0.2, 0.25]).unwrap();
    let costs = [[0.3, 1.1], [0.9, 0.4]];
    let u = UnaryField::new(2, 1, costs.to_vec()).unwrap();
    let p = CrfParams { iterations: 1, ..CrfParams::default() };
    let q = meanfield_refine(&img, &u, &p).unwrap().q_fg;
    let (dx, di) = (1.0f64, 0.05f64);
    let k = p.w_app * (-dx * dx / (2.0 * p.theta_alpha.powi(2)) - di * di / (2.0 * p.theta_beta.powi(2))).exp()
        + p.w_smooth * (-dx * dx / (2.0 * p.theta_gamma.powi(2))).exp();
    let q0: Vec<f64> = costs.iter().map(|c| (-c[1]).exp() / ((-c[0]).exp() + (-c[1]).exp())).collect();
    let mut closed_err: f64 = 0.0;
    for i in 0..2 {
        let j = 1 - i;
        let fg = (-costs[i][1] - k * (1.0 - q0[j])).exp();
        let bg = (-costs[i][0] - k * q0[j]).exp();
        closed_err = closed_err.max((q.data()[i] - fg / (fg + bg)).abs());
    }

    let mut norm_bad = 0;
    for _ in 0..3 {
        let (img, u) = random_field(32, 32, &mut rng);
        for qf in meanfield_trace(&img, &u, &CrfParams::default()).unwrap() {
            // background marginal is 1 - q; both must be valid probabilities
            if qf.iter().any(|&v| !(0.0..=1.0).contains(&v) || ((1.0 - v) + v - 1.0).abs() > 1e-12) {
                norm_bad += 1;
            }
        }
    }
    let ok = argmax_bad == 0 && closed_err <= 1e-12 && norm_bad == 0;
    (ok, format!("argmax mismatches {argmax_bad}/100, 2-pixel error {closed_err:.1e}, unnormalized iterates {norm_bad}"))
}

// ---------------------------------------------------------------- 6

fn brute_avd(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let dir = |from: &BinaryMask, to: &BinaryMask| {
        let to_pts = to.foreground();
        let from_pts = from.foreground();
        let sum: f64 = from_pts
            .iter()
            .map(|&(x, y)| {
                to_pts
                    .iter()
                    .map(|&(u, v)| ((x as f64 - u as f64).powi(2) + (y as f64 - v as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        sum / from_pts.len() as f64
    };
    dir(a, b).max(dir(b, a))
}

fn metric_oracles() -> Outcome {
    let mut rng = SeededRng::new(6000);
    let mut worst: f64 = 0.0;
    let mut identity_worst: f64 = 0.0;
    let mut avd_checked = 0;
    for _ in 0..1000 {
        let (dp, dg) = (rng.uniform(), rng.uniform());
        let pred = BinaryMask::from_fn(16, 16, |_, _| rng.uniform() < dp);
        let gt = BinaryMask::from_fn(16, 16, |_, _| rng.uniform() < dg);
        let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
        for y in 0..16 {
            for x in 0..16 {
                match (pred.get(x, y), gt.get(x, y)) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fnn += 1.0,
                    _ => {}
                }
            }
        }
        let c = confusion(&pred, &gt).unwrap();
        let mut diffs = Vec::new();
        if tp + fnn > 0.0 {
            diffs.push(c.recall() - tp / (tp + fnn));
        }
        if tp + fp > 0.0 {
            diffs.push(c.precision() - tp / (tp + fp));
        }
        if 2.0 * tp + fp + fnn > 0.0 {
            diffs.push(c.dice() - 2.0 * tp / (2.0 * tp + fp + fnn));
            diffs.push(c.volumetric_similarity() - (1.0 - (fnn - fp).abs() / (2.0 * tp + fp + fnn)));
        }
        if !pred.is_empty() && !gt.is_empty() {
            diffs.push(averaged_hausdorff(&pred, &gt, AvdMode::Max).unwrap() - brute_avd(&pred, &gt));
            avd_checked += 1;
        }
        worst = diffs.iter().fold(worst, |m, d| m.max(d.abs()));
        let (r, p) = (c.recall(), c.precision());
        if tp > 0.0 {
            identity_worst = identity_worst.max((c.dice() - 2.0 * p * r / (p + r)).abs());
        }
    }
    let ok = worst <= 1e-6 && identity_worst <= 1e-12;
    (ok, format!("worst oracle difference {worst:.1e} ({avd_checked} AVD cases), harmonic identity {identity_worst:.1e}"))
}

// ---------------------------------------------------------------- 7, 8

struct PhantomRuns {
    _dir: tempfile::TempDir,
    coseg: Run,
    single: Run,
    random: Run,
    repeat: Run,
    stress: (f64, f64),
    secs: f64,
}

struct Run {
    pipeline: Pipeline,
    eval: Evaluation,
}

impl Run {
    fn dice(&self, source: &str) -> f64 {
        self.eval.reports.iter().find(|(n, _)| n == source).map(|(_, r)| r.aggregate.dice.mean).unwrap_or(f64::NAN)
    }
}

fn phantom_config(data: &Path, out: &Path) -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/phantom.toml");
    let mut cfg = PipelineConfig::load(&path).expect("phantom config loads");
    cfg.paths.images = data.join("images");
    cfg.paths.annotations = data.join("annotations.csv");
    cfg.paths.ground_truth = Some(data.join("gt"));
    cfg.paths.archetypes = Some(data.join("archetypes.csv"));
    cfg.paths.output = out.to_path_buf();
    cfg
}

fn run(cfg: PipelineConfig, phantoms: bool) -> Run {
    let pipeline = Pipeline::new(cfg, false).expect("valid config");
    let (_, eval) = pipeline.run(phantoms).expect("pipeline runs");
    Run { pipeline, eval }
}

/// Two-region phantoms with 10% of unary labels flipped; mean Dice of the
/// unary argmax and of the refined mask.
fn noisy_unary_stress(cfg: &PipelineConfig) -> (f64, f64) {
    let phantoms = generate(&cfg.phantoms, cfg.seed).expect("phantoms");
    let mut rng = SeededRng::new(cfg.seed).fork(77);
    let (mut before, mut after) = (0.0, 0.0);
    let n = 20;
    for ph in phantoms.iter().take(n) {
        let roi = Roi::around(&ph.recist, ph.image.width(), ph.image.height(), cfg.refine.margin).unwrap();
        let gt = roi.crop_mask(&ph.mask);
        let img = coseg_core::grid::normalize(&roi.crop_image(&ph.image));
        let prob = ImageGrid::from_fn(roi.width, roi.height, |x, y| if gt.get(x, y) ^ (rng.uniform() < 0.1) { 0.8 } else { 0.2 });
        let argmax = unary_from_prob(&prob).argmin_mask();
        let refined = refine_probability(&img, &prob, &cfg.crf).unwrap().mask;
        before += confusion(&argmax, &gt).unwrap().dice();
        after += confusion(&refined, &gt).unwrap().dice();
    }
    (before / n as f64, after / n as f64)
}

impl PhantomRuns {
    fn new() -> PhantomRuns {
        let t = Instant::now();
        let dir = tempfile::tempdir().expect("tempdir");
        let data = dir.path().join("data");
        let coseg = run(phantom_config(&data, &dir.path().join("coseg")), true);
        let mut cfg = phantom_config(&data, &dir.path().join("single"));
        cfg.train.single_branch = true;
        let single = run(cfg, false);
        let mut cfg = phantom_config(&data, &dir.path().join("random"));
        cfg.clustering.pairing = coseg_core::pipeline::Pairing::Random;
        let random = run(cfg, false);
        let secs = t.elapsed().as_secs_f64();
        let stress = noisy_unary_stress(coseg.pipeline.config());
        let repeat = run(phantom_config(&dir.path().join("data2"), &dir.path().join("repeat")), true);
        PhantomRuns { _dir: dir, coseg, single, random, repeat, stress, secs }
    }

    fn trend(&self) -> Outcome {
        let grabcut = self.coseg.dice("grabcut");
        let (net, refined) = (self.coseg.dice("network"), self.coseg.dice("network+crf"));
        let (single, random) = (self.single.dice("network"), self.random.dice("network"));
        let checks = [
            ("a", grabcut >= 0.85),
            ("b", net - single >= 0.01),
            ("c", net - random >= 0.01),
            ("d", refined >= net - 0.005 && self.stress.1 > self.stress.0),
            ("time", self.secs <= 1800.0),
        ];
        let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
        let msg = format!(
            "grabcut {grabcut:.4}, coseg {net:.4}, single-branch {single:.4} ({:+.4}), random pairs {random:.4} ({:+.4}), crf {refined:.4} ({:+.4}), stress {:.4} -> {:.4}, {:.0}s{}",
            net - single,
            net - random,
            refined - net,
            self.stress.0,
            self.stress.1,
            self.secs,
            if failed.is_empty() { String::new() } else { format!("; failed parts {failed:?}") }
        );
        (failed.is_empty(), msg)
    }

    fn determinism(&self) -> Outcome {
        let (a, b) = (&self.coseg.pipeline, &self.repeat.pipeline);
        let mut files: Vec<String> = vec!["model.ckpt".into(), "report_table.txt".into()];
        for src in ["grabcut", "network", "network_crf"] {
            files.push(format!("report_{src}.csv"));
            files.push(format!("report_{src}.json"));
        }
        for e in fs::read_dir(a.out("overlays")).expect("overlays written") {
            files.push(format!("overlays/{}", e.unwrap().file_name().to_string_lossy()));
        }
        let differ: Vec<&String> = files.iter().filter(|f| read(&a.out(f)) != read(&b.out(f))).collect();
        (differ.is_empty(), format!("{} files compared, {} differ {:?}", files.len(), differ.len(), differ.iter().take(5).collect::<Vec<_>>()))
    }
}

fn read(p: &PathBuf) -> Option<Vec<u8>> {
    fs::read(p).ok()
}

// ---------------------------------------------------------------- 9

fn kmeans_checks(runs: &PhantomRuns) -> Outcome {
    let mut rising = 0;
    for run in 0..100u64 {
        let mut rng = SeededRng::new(9000 + run);
        let n = 20 + rng.below(60);
        let d = 1 + rng.below(6);
        let k = 1 + rng.below(8);
        let feats: Vec<LesionFeature> = (0..n)
            .map(|i| {
                let center = (i % 3) as f64 * 3.0;
                LesionFeature { lesion_id: format!("p{i}"), vector: (0..d).map(|_| center + rng.normal()).collect() }
            })
            .collect();
        let (_, trace) = kmeans_traced(&feats, k, 50, &mut rng).unwrap();
        if trace.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12)) {
            rising += 1;
        }
    }

    let p = &runs.coseg.pipeline;
    let clusters = artifacts::read_clusters(&p.out("clusters.csv")).expect("clusters written");
    let truth = artifacts::read_archetypes(p.config().paths.archetypes.as_ref().unwrap()).expect("archetypes written");
    let k = 4;
    let mut counts = vec![vec![0usize; k]; k];
    for row in &truth {
        counts[clusters.cluster_of(&row.lesion_id).unwrap()][row.archetype] += 1;
    }
    let mut best = 0;
    for perm in permutations(k) {
        best = best.max((0..k).map(|c| counts[c][perm[c]]).sum::<usize>());
    }
    let agreement = best as f64 / truth.len() as f64;
    (rising == 0 && agreement >= 0.9, format!("{rising}/100 runs with rising inertia, archetype agreement {:.1}%", agreement * 100.0))
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}
