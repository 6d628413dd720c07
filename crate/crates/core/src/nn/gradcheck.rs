//! Finite-difference verification of analytic network gradients.
//!
//! Perturbations that move a ReLU or max selection across its kink are
//! detected through [`Graph::kink_signature`]. Such scalars fall back to the
//! one-sided difference on the side that stays on the same smooth piece, and
//! are dropped only when both sides cross.

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::model::CosegNet;
use crate::nn::kernels::ConvGeom;
use crate::nn::tensor::Tensor;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the tensor (L2 norms).
    pub rel_error: f64,
    pub central: usize,
    pub one_sided: usize,
    pub skipped: usize,
}

/// Loss used by the checks: summed cross-entropy of both branches.
pub fn pair_loss(net: &CosegNet, a: &Tensor, b: &Tensor, ta: &[u8], tb: &[u8]) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let (la, lb) = net.forward_pair(&mut g, va, vb)?;
    let ca = g.cross_entropy(la, ta)?;
    let cb = g.cross_entropy(lb, tb)?;
    let loss = g.add(ca, cb)?;
    Ok((g, loss))
}

fn eval(net: &CosegNet, a: &Tensor, b: &Tensor, ta: &[u8], tb: &[u8]) -> Result<(f64, u64)> {
    let (g, l) = pair_loss(net, a, b, ta, tb)?;
    Ok((g.value(l).item(), g.kink_signature()))
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic.iter().zip(numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Checks every parameter of `net` with central differences of size `step`.
/// Parameters are restored before returning.
pub fn check_pair_network(net: &mut CosegNet, a: &Tensor, b: &Tensor, ta: &[u8], tb: &[u8], step: f64) -> Result<Vec<ParamCheck>> {
    let (mut g, loss) = pair_loss(net, a, b, ta, tb)?;
    let base_sig = g.kink_signature();
    let f0 = g.value(loss).item();
    g.backward(loss)?;
    let mut grads = net.params().clone();
    grads.zero_grads();
    g.accumulate_param_grads(&mut grads)?;
    let mut out = Vec::with_capacity(net.params().len());
    for id in 0..net.params().len() {
        let mut check = ParamCheck { name: net.params().name(id).to_string(), rel_error: 0.0, central: 0, one_sided: 0, skipped: 0 };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..net.params().value(id).len() {
            let orig = net.params().value(id).data()[i];
            net.params_mut().value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(net, a, b, ta, tb);
            net.params_mut().value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(net, a, b, ta, tb);
            net.params_mut().value_mut(id).data_mut()[i] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);
            let one_sided = |net: &mut CosegNet, dir: f64, f1: f64| -> Result<Option<f64>> {
                net.params_mut().value_mut(id).data_mut()[i] = orig + 2.0 * dir * step;
                let far = eval(net, a, b, ta, tb);
                net.params_mut().value_mut(id).data_mut()[i] = orig;
                let (f2, s2) = far?;
                // second-order one-sided stencil
                Ok((s2 == base_sig).then(|| dir * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * step)))
            };
            let d = match (sp == base_sig, sm == base_sig) {
                (true, true) => Some((fp - fm) / (2.0 * step)),
                (true, false) => one_sided(net, 1.0, fp)?,
                (false, true) => one_sided(net, -1.0, fm)?,
                (false, false) => None,
            };
            let Some(d) = d else {
                check.skipped += 1;
                continue;
            };
            if sp == base_sig && sm == base_sig {
                check.central += 1;
            } else {
                check.one_sided += 1;
            }
            numeric.push(d);
            analytic.push(grads.grad(id).data()[i]);
        }
        check.rel_error = relative_error(&analytic, &numeric);
        out.push(check);
    }
    Ok(out)
}

pub type OperatorFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One operator under test with its inputs.
pub struct OperatorCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub op: OperatorFn,
}

fn normal_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// Every graph operator on small random inputs drawn from `r`.
pub fn operator_cases(r: &mut SeededRng) -> Vec<OperatorCase> {
    fn case(name: &'static str, inputs: Vec<Tensor>, op: OperatorFn) -> OperatorCase {
        OperatorCase { name, inputs, op }
    }
    vec![
        case("conv", vec![normal_tensor(&[2, 2, 6, 5], r), normal_tensor(&[3, 2, 3, 3], r), normal_tensor(&[3], r)],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(2, 1, 1)))),
        case("conv-dilated", vec![normal_tensor(&[1, 2, 7, 7], r), normal_tensor(&[2, 2, 3, 3], r)],
            Box::new(|g, v| g.conv2d(v[0], v[1], None, ConvGeom::new(1, 2, 2)))),
        case("conv-1x1", vec![normal_tensor(&[2, 3, 4, 4], r), normal_tensor(&[2, 3, 1, 1], r)],
            Box::new(|g, v| g.conv2d(v[0], v[1], None, ConvGeom::new(1, 0, 1)))),
        case("relu", vec![normal_tensor(&[2, 3, 4], r)], Box::new(|g, v| Ok(g.relu(v[0])))),
        case("sigmoid", vec![normal_tensor(&[7], r)], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        case("maxpool", vec![normal_tensor(&[2, 2, 5, 4], r)], Box::new(|g, v| g.max_pool2d(v[0]))),
        case("gap", vec![normal_tensor(&[2, 3, 3, 2], r)], Box::new(|g, v| g.global_avg_pool(v[0]))),
        case("linear", vec![normal_tensor(&[3, 4], r), normal_tensor(&[2, 4], r), normal_tensor(&[2], r)],
            Box::new(|g, v| g.fully_connected(v[0], v[1], Some(v[2])))),
        case("mul-broadcast", vec![normal_tensor(&[2, 3, 2, 2], r), normal_tensor(&[2, 3, 1, 1], r)], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("mul-spatial", vec![normal_tensor(&[2, 3, 2, 2], r), normal_tensor(&[2, 1, 2, 2], r)], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("add", vec![normal_tensor(&[4], r), normal_tensor(&[4], r)], Box::new(|g, v| g.add(v[0], v[1]))),
        case("concat", vec![normal_tensor(&[2, 1, 2, 3], r), normal_tensor(&[2, 2, 2, 3], r)], Box::new(|g, v| g.concat_channels(v[0], v[1]))),
        case("mean-max", vec![normal_tensor(&[2, 4, 3, 3], r)], Box::new(|g, v| g.channel_mean_max(v[0]))),
        case("upsample", vec![normal_tensor(&[1, 2, 3, 4], r)], Box::new(|g, v| g.bilinear_upsample(v[0], 7, 5))),
        case("softmax", vec![normal_tensor(&[2, 3, 2, 2], r)], Box::new(|g, v| g.softmax_channels(v[0]))),
        case("cross-entropy", vec![normal_tensor(&[2, 2, 3, 3], r)], Box::new(|g, v| {
            let t: Vec<u8> = (0..18).map(|i| (i * 7 % 3 == 0) as u8).collect();
            g.cross_entropy(v[0], &t)
        })),
        case("reshape-scale", vec![normal_tensor(&[2, 6], r)], Box::new(|g, v| {
            let y = g.reshape(v[0], &[2, 3, 2, 1])?;
            Ok(g.scale(y, -1.5))
        })),
    ]
}

/// Worst relative error, over all inputs, between analytic and central
/// difference gradients of `sum(op(inputs) * w)` for a fixed random `w`.
pub fn check_operator(inputs: Vec<Tensor>, op: OperatorFn, step: f64) -> f64 {
    let build = |ins: &[Tensor], weights: Option<&Tensor>| -> (Graph, Vec<Var>, Var, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let out = op(&mut g, &vars).expect("operator accepts its inputs");
        let w = weights.cloned().unwrap_or_else(|| normal_tensor(g.value(out).shape(), &mut SeededRng::new(99)));
        let l = g.dot(out, w.clone()).expect("weights match output");
        (g, vars, l, w)
    };
    let (mut g, vars, loss, w) = build(&inputs, None);
    g.backward(loss).expect("loss is scalar");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= step;
            let (gp, _, lp, _) = build(&plus, Some(&w));
            let (gm, _, lm, _) = build(&minus, Some(&w));
            *n = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * step);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}
