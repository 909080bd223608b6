//! Adversarial attack generation and evaluation protocols.
//!
//! Attacks are momentum-iterated signed-gradient methods under an L-infinity
//! budget, projected into B_inf(x, eps) and [0,1] after every step. Method
//! dispatch: `Pgd` optionally starts at a random point in the ball;
//! `Mdi2Fgsm` pushes each gradient step through a randomized resize-and-pad
//! input transform; `Sgm` scales gradients flowing through residual branches
//! during backward.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::Scalar;
use crate::rgn::Classifier;
use crate::rng::{self, Stream};

pub use crate::nn::ops::{cw_margin_loss, cw_margin_with_grad};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Pgd,
    Mdi2Fgsm,
    Sgm,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Pgd => "pgd",
            AttackMethod::Mdi2Fgsm => "mdi2fgsm",
            AttackMethod::Sgm => "sgm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    CrossEntropy,
    Cw,
}

impl AttackLoss {
    pub fn name(&self) -> &'static str {
        match self {
            AttackLoss::CrossEntropy => "ce",
            AttackLoss::Cw => "cw",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub loss: AttackLoss,
    /// L-infinity budget.
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_starts: usize,
    /// Start from a uniform point inside the ball (otherwise from x).
    pub random_start_init: bool,
    /// Momentum decay mu of the gradient accumulator.
    pub momentum: f64,
    pub cw_kappa: f64,
    /// Probability of applying the diverse-input transform per step.
    pub mdi2_prob: f64,
    /// Lower bound of the resize factor (upper bound is 1.0).
    pub mdi2_resize_lo: f64,
    /// Residual-branch gradient decay for skip-gradient attacks.
    pub sgm_gamma: f64,
}

impl AttackSpec {
    pub fn new(method: AttackMethod, loss: AttackLoss, eps: f64) -> Self {
        Self {
            method,
            loss,
            eps,
            steps: 100,
            step_size: eps / 5.0,
            random_starts: 1,
            random_start_init: true,
            momentum: 1.0,
            cw_kappa: 0.0,
            mdi2_prob: 0.5,
            mdi2_resize_lo: 0.9,
            sgm_gamma: 0.2,
        }
    }

    /// Transfer-attack generation settings: 100 steps of eps/5.
    pub fn blackbox(method: AttackMethod, loss: AttackLoss, eps: f64) -> Self {
        let starts = if method == AttackMethod::Pgd { 3 } else { 1 };
        Self { random_starts: starts, ..Self::new(method, loss, eps) }
    }

    /// White-box settings: 50-step PGD of eps/5 with five random starts.
    pub fn whitebox(eps: f64) -> Self {
        Self {
            steps: 50,
            random_starts: 5,
            ..Self::new(AttackMethod::Pgd, AttackLoss::CrossEntropy, eps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 {
            return Err(Error::Config("attack eps must be >= 0".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("attack needs at least 1 step".into()));
        }
        if self.random_starts < 1 {
            return Err(Error::Config("attack needs at least 1 start".into()));
        }
        if !(0.0..=1.0).contains(&self.mdi2_prob) {
            return Err(Error::Config("mdi2 probability must be in [0,1]".into()));
        }
        if !(0.0 < self.mdi2_resize_lo && self.mdi2_resize_lo <= 1.0) {
            return Err(Error::Config("mdi2 resize bound must be in (0,1]".into()));
        }
        Ok(())
    }

    /// Stable descriptor used in inventories and cache keys.
    pub fn descriptor(&self) -> String {
        format!(
            "{}/{}/eps{}/steps{}/ss{}/mu{}",
            self.method.name(),
            self.loss.name(),
            self.eps,
            self.steps,
            self.step_size,
            self.momentum
        )
    }
}

/// One adversarial batch per random start, plus flags.
pub struct AttackOutput<F> {
    pub versions: Vec<Array4<F>>,
    /// Set when sgm was requested on a model without skip connections and
    /// the attack fell back to pgd.
    pub sgm_fell_back: bool,
}

impl<F: Scalar> AttackOutput<F> {
    /// Per-sample worst case over versions: the version that flips the
    /// prediction, or the last one. Requires target evaluation, so this
    /// selects by correctness flags computed by the caller.
    pub fn len(&self) -> usize {
        self.versions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.versions.is_empty()
    }
}

fn sign<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Ascend-direction dlogits for the configured loss: gradients of the
/// objective the attack maximizes.
fn ascend_dlogits<F: Scalar>(
    loss: AttackLoss,
    kappa: f64,
    logits: &Array2<F>,
    y: &[usize],
) -> Array2<F> {
    match loss {
        AttackLoss::CrossEntropy => {
            let (_, d) = ops::cross_entropy_with_grad(logits, y).expect("validated shapes");
            d
        }
        AttackLoss::Cw => {
            // maximizing the attack objective = minimizing the margin
            let (_, d) = ops::cw_margin_with_grad(logits, y, F::cast(kappa)).expect("validated");
            d.mapv(|v| -v)
        }
    }
}

/// Randomized resize-and-pad transform with exact adjoint for backprop.
struct ResizePad {
    /// (canvas spatial index, source spatial index)
    pairs: Vec<(usize, usize)>,
    h: usize,
    w: usize,
}

impl ResizePad {
    fn sample<R: Rng>(h: usize, w: usize, lo: f64, rng: &mut R) -> Self {
        let rh = ((h as f64 * (lo + (1.0 - lo) * rng.random::<f64>())).round() as usize)
            .clamp(1, h);
        let rw = ((w as f64 * (lo + (1.0 - lo) * rng.random::<f64>())).round() as usize)
            .clamp(1, w);
        let off_y = rng.random_range(0..=(h - rh));
        let off_x = rng.random_range(0..=(w - rw));
        let mut pairs = Vec::with_capacity(rh * rw);
        for oy in 0..rh {
            let sy = (oy * h) / rh;
            for ox in 0..rw {
                let sx = (ox * w) / rw;
                pairs.push((((oy + off_y) * w) + ox + off_x, sy * w + sx));
            }
        }
        ResizePad { pairs, h, w }
    }

    fn apply<F: Scalar>(&self, x: &Array4<F>) -> Array4<F> {
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let hw = self.h * self.w;
        let mut out = Array4::zeros(x.raw_dim());
        let xs = x.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for img in 0..b * c {
            let src = &xs[img * hw..(img + 1) * hw];
            let dst = &mut os[img * hw..(img + 1) * hw];
            for &(cv, sv) in &self.pairs {
                dst[cv] = src[sv];
            }
        }
        out
    }

    fn backprop<F: Scalar>(&self, dy: &Array4<F>) -> Array4<F> {
        let (b, c) = (dy.shape()[0], dy.shape()[1]);
        let hw = self.h * self.w;
        let mut out = Array4::zeros(dy.raw_dim());
        let ds = dy.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for img in 0..b * c {
            let src = &ds[img * hw..(img + 1) * hw];
            let dst = &mut os[img * hw..(img + 1) * hw];
            for &(cv, sv) in &self.pairs {
                dst[sv] = dst[sv] + src[cv];
            }
        }
        out
    }
}

/// Per-sample L1-normalized gradient accumulation (momentum-iterative FGSM).
fn accumulate_momentum<F: Scalar>(g: &mut Array4<F>, grad: &Array4<F>, mu: F) {
    let b = grad.shape()[0];
    let tiny = F::cast(1e-12);
    for bi in 0..b {
        let gi = grad.index_axis(Axis(0), bi);
        let mut norm = F::zero();
        for v in gi.iter() {
            norm = norm + v.abs();
        }
        let scale = if norm > tiny { F::one() / norm } else { F::zero() };
        let mut acc = g.index_axis_mut(Axis(0), bi);
        ndarray::Zip::from(&mut acc).and(&gi).for_each(|a, &v| {
            *a = *a * mu + v * scale;
        });
    }
}

/// Generate adversarial examples for `(x, y)` against `model`. Returns one
/// batch per random start; every output satisfies the eps ball and [0,1]
/// constraints exactly.
pub fn attack<F: Scalar>(
    model: &dyn Classifier<F>,
    x: &Array4<F>,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut Stream,
) -> Result<AttackOutput<F>> {
    spec.validate()?;
    if x.shape()[0] != y.len() {
        return Err(Error::Shape(format!(
            "{} inputs vs {} labels",
            x.shape()[0],
            y.len()
        )));
    }
    let (mut method, mut fell_back) = (spec.method, false);
    if method == AttackMethod::Sgm && !model.has_skip_connections() {
        method = AttackMethod::Pgd;
        fell_back = true;
    }
    let eps = F::cast(spec.eps);
    let alpha = F::cast(spec.step_size);
    let mu = F::cast(spec.momentum);
    let sgm_gamma =
        (method == AttackMethod::Sgm).then(|| F::cast(spec.sgm_gamma));
    let (h, w) = (x.shape()[2], x.shape()[3]);

    let mut versions = Vec::with_capacity(spec.random_starts);
    for _start in 0..spec.random_starts {
        let mut x_adv = x.clone();
        if spec.random_start_init && spec.eps > 0.0 {
            x_adv.mapv_inplace(|v| {
                let u = F::sample_unit(rng);
                v + (u + u - F::one()) * eps
            });
            ops::clamp_to_ball(&mut x_adv, x, eps);
        }
        let mut g: Array4<F> = Array4::zeros(x.raw_dim());
        for _step in 0..spec.steps {
            let transform = if method == AttackMethod::Mdi2Fgsm
                && rng.random::<f64>() < spec.mdi2_prob
            {
                Some(ResizePad::sample(h, w, spec.mdi2_resize_lo, rng))
            } else {
                None
            };
            let x_in = match &transform {
                Some(t) => t.apply(&x_adv),
                None => x_adv.clone(),
            };
            let dl = |logits: &Array2<F>| ascend_dlogits(spec.loss, spec.cw_kappa, logits, y);
            let (_, grad_in) = model.input_grad(&x_in, &dl, sgm_gamma)?;
            let grad = match &transform {
                Some(t) => t.backprop(&grad_in),
                None => grad_in,
            };
            accumulate_momentum(&mut g, &grad, mu);
            ndarray::Zip::from(&mut x_adv).and(&g).for_each(|zi, &gi| {
                *zi = *zi + alpha * sign(gi);
            });
            ops::clamp_to_ball(&mut x_adv, x, eps);
        }
        versions.push(x_adv);
    }
    Ok(AttackOutput { versions, sgm_fell_back: fell_back })
}

/// Fraction of samples classified correctly under *every* attack version.
pub fn all_or_nothing(correct_flags: &[Vec<bool>]) -> Result<f64> {
    if correct_flags.is_empty() {
        return Ok(0.0);
    }
    let attacks = correct_flags[0].len();
    if attacks == 0 {
        return Err(Error::Invalid("all-or-nothing needs at least one attack".into()));
    }
    for row in correct_flags {
        if row.len() != attacks {
            return Err(Error::Invalid("ragged correctness matrix".into()));
        }
    }
    let ok = correct_flags.iter().filter(|row| row.iter().all(|&b| b)).count();
    Ok(ok as f64 / correct_flags.len() as f64)
}

/// Per-epsilon evaluation row; CSV schema of every report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub model_id: String,
    pub protocol: String,
    pub eps: f64,
    pub accuracy: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub attack_inventory_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub protocol: String,
    pub clean_accuracy: f64,
    pub rows: Vec<EvalRow>,
    pub attack_inventory: Vec<String>,
    pub attack_inventory_hash: String,
    pub n_samples: usize,
    pub seed: u64,
    /// Identifiers of the surrogate models used for generation.
    pub surrogates: Vec<String>,
    pub warnings: Vec<String>,
}

fn inventory_hash(inventory: &[String]) -> String {
    let mut h = Sha256::new();
    for item in inventory {
        h.update(item.as_bytes());
        h.update([0u8]);
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// A named frozen model.
pub struct NamedModel<'a, F> {
    pub id: String,
    pub model: &'a dyn Classifier<F>,
}

/// Optional sink receiving every generated adversarial batch, keyed by a
/// cache descriptor `(surrogate, method, loss, eps, start)`.
pub type AdvSink<'s, F> = &'s mut dyn FnMut(&str, &Array4<F>);

fn correct_flags<F: Scalar>(model: &dyn Classifier<F>, x: &Array4<F>, y: &[usize]) -> Result<Vec<bool>> {
    let logits = model.logits(x)?;
    let preds = ops::argmax_rows(&logits);
    Ok(preds.iter().zip(y.iter()).map(|(p, t)| p == t).collect())
}

/// Black-box transfer protocol: per surrogate, generate
/// {PGD (3 starts), M-DI2-FGSM, SGM} x {CE, C&W} adversarial versions and
/// score the target all-or-nothing per epsilon.
#[allow(clippy::too_many_arguments)]
pub fn blackbox_protocol<F: Scalar>(
    target: &NamedModel<'_, F>,
    surrogates: &[NamedModel<'_, F>],
    eps_list: &[f64],
    x: &Array4<F>,
    y: &[usize],
    seed: u64,
    mut sink: Option<AdvSink<'_, F>>,
) -> Result<EvalReport> {
    if surrogates.is_empty() {
        return Err(Error::Invalid("black-box protocol needs at least one surrogate".into()));
    }
    let clean = clean_accuracy(target.model, x, y)?;
    let mut rows = Vec::new();
    let mut inventory = Vec::new();
    let mut warnings = Vec::new();
    let methods = [AttackMethod::Pgd, AttackMethod::Mdi2Fgsm, AttackMethod::Sgm];
    let losses = [AttackLoss::CrossEntropy, AttackLoss::Cw];

    for &eps in eps_list {
        let mut flags: Vec<Vec<bool>> = vec![Vec::new(); y.len()];
        let mut eps_inventory = Vec::new();
        for surrogate in surrogates {
            for method in methods {
                for loss in losses {
                    let spec = AttackSpec::blackbox(method, loss, eps);
                    let label = format!("{}@{}", spec.descriptor(), surrogate.id);
                    let atk_seed = rng::derive_seed(seed, &label, 0);
                    let mut stream = rng::stream(atk_seed, "attack", 0);
                    let out = attack(surrogate.model, x, y, &spec, &mut stream)?;
                    if out.sgm_fell_back {
                        let msg = format!("sgm fell back to pgd on surrogate {}", surrogate.id);
                        if !warnings.contains(&msg) {
                            warnings.push(msg);
                        }
                    }
                    for (start, version) in out.versions.iter().enumerate() {
                        if let Some(s) = sink.as_mut() {
                            let key = format!(
                                "{}/{}/{}/eps{}/start{}",
                                surrogate.id,
                                method.name(),
                                loss.name(),
                                eps,
                                start
                            );
                            s(&key, version);
                        }
                        let vf = correct_flags(target.model, version, y)?;
                        for (row, ok) in flags.iter_mut().zip(vf) {
                            row.push(ok);
                        }
                        eps_inventory.push(format!("{label}/start{start}"));
                    }
                }
            }
        }
        let acc = all_or_nothing(&flags)?;
        if inventory.is_empty() {
            inventory = eps_inventory;
        }
        rows.push(EvalRow {
            model_id: target.id.clone(),
            protocol: "blackbox".into(),
            eps,
            accuracy: acc,
            n_samples: y.len(),
            seed,
            attack_inventory_hash: String::new(),
        });
    }
    let hash = inventory_hash(&inventory);
    for r in &mut rows {
        r.attack_inventory_hash = hash.clone();
    }
    Ok(EvalReport {
        model_id: target.id.clone(),
        protocol: "blackbox".into(),
        clean_accuracy: clean,
        rows,
        attack_inventory: inventory,
        attack_inventory_hash: hash,
        n_samples: y.len(),
        seed,
        surrogates: surrogates.iter().map(|s| s.id.clone()).collect(),
        warnings,
    })
}

/// White-box protocol: 50-step PGD at eps/5 with five random starts,
/// all-or-nothing over the five versions.
pub fn whitebox_protocol<F: Scalar>(
    target: &NamedModel<'_, F>,
    eps_list: &[f64],
    x: &Array4<F>,
    y: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    let clean = clean_accuracy(target.model, x, y)?;
    let mut rows = Vec::new();
    let mut inventory = Vec::new();
    for &eps in eps_list {
        let spec = AttackSpec::whitebox(eps);
        let label = format!("{}@{}", spec.descriptor(), target.id);
        let atk_seed = rng::derive_seed(seed, &label, 0);
        let mut stream = rng::stream(atk_seed, "attack", 0);
        let out = attack(target.model, x, y, &spec, &mut stream)?;
        let mut flags: Vec<Vec<bool>> = vec![Vec::new(); y.len()];
        for (start, version) in out.versions.iter().enumerate() {
            let vf = correct_flags(target.model, version, y)?;
            for (row, ok) in flags.iter_mut().zip(vf) {
                row.push(ok);
            }
            if inventory.len() < out.versions.len() {
                inventory.push(format!("{label}/start{start}"));
            }
        }
        rows.push(EvalRow {
            model_id: target.id.clone(),
            protocol: "whitebox".into(),
            eps,
            accuracy: all_or_nothing(&flags)?,
            n_samples: y.len(),
            seed,
            attack_inventory_hash: String::new(),
        });
    }
    let hash = inventory_hash(&inventory);
    for r in &mut rows {
        r.attack_inventory_hash = hash.clone();
    }
    Ok(EvalReport {
        model_id: target.id.clone(),
        protocol: "whitebox".into(),
        clean_accuracy: clean,
        rows,
        attack_inventory: inventory,
        attack_inventory_hash: hash,
        n_samples: y.len(),
        seed,
        surrogates: Vec::new(),
        warnings: Vec::new(),
    })
}

pub fn clean_accuracy<F: Scalar>(model: &dyn Classifier<F>, x: &Array4<F>, y: &[usize]) -> Result<f64> {
    let logits = model.logits(x)?;
    Ok(ops::accuracy(&logits, y))
}

/// Pairwise attack success rates at a fixed attack spec. Entry (i, j) is the
/// success rate of examples generated on model i against model j, measured
/// on the samples model j classifies correctly when clean; a sample counts
/// as a success if any generated version fools the target.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub ids: Vec<String>,
    pub eps: f64,
    /// Row-major success rates, source x target.
    pub rates: Vec<Vec<f64>>,
}

impl TransferMatrix {
    /// Mean of the off-diagonal entries: within-set transferability.
    pub fn mean_off_diagonal(&self) -> f64 {
        let k = self.ids.len();
        if k < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    acc += self.rates[i][j];
                    count += 1;
                }
            }
        }
        acc / count as f64
    }
}

pub fn transfer_matrix<F: Scalar>(
    models: &[NamedModel<'_, F>],
    spec: &AttackSpec,
    x: &Array4<F>,
    y: &[usize],
    seed: u64,
) -> Result<TransferMatrix> {
    if models.is_empty() {
        return Err(Error::Invalid("transfer matrix needs at least one model".into()));
    }
    spec.validate()?;
    // clean-correct masks per target
    let clean_masks: Vec<Vec<bool>> = models
        .iter()
        .map(|m| correct_flags(m.model, x, y))
        .collect::<Result<_>>()?;
    let k = models.len();
    let mut rates = vec![vec![0.0f64; k]; k];
    for (i, source) in models.iter().enumerate() {
        let label = format!("{}@{}", spec.descriptor(), source.id);
        let atk_seed = rng::derive_seed(seed, &label, 0);
        let mut stream = rng::stream(atk_seed, "attack", 0);
        let out = attack(source.model, x, y, spec, &mut stream)?;
        // fooled[j][sample] = any version misclassified by target j
        for (j, target) in models.iter().enumerate() {
            let mut fooled = vec![false; y.len()];
            for version in &out.versions {
                let vf = correct_flags(target.model, version, y)?;
                for (f, ok) in fooled.iter_mut().zip(vf) {
                    if !ok {
                        *f = true;
                    }
                }
            }
            let denom = clean_masks[j].iter().filter(|&&b| b).count();
            let hits = fooled
                .iter()
                .zip(&clean_masks[j])
                .filter(|(f, c)| **f && **c)
                .count();
            rates[i][j] = if denom > 0 { hits as f64 / denom as f64 } else { 0.0 };
        }
    }
    Ok(TransferMatrix {
        ids: models.iter().map(|m| m.id.clone()).collect(),
        eps: spec.eps,
        rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_rgn_spec, make_scope, parse_arch, ScopeMode};
    use crate::check::{max_rel_err, numerical_grad};
    use crate::nn::Feature;
    use crate::rgn::{Network, Path, RgnModel};
    use crate::rng::labels;
    use ndarray::Array1;

    const RES_NET: &str = "\
in input shape=3x8x8
c1 conv in=3 out=4 k=3 stride=1 pad=1
b1 batchnorm features=4
r1 activation fn=relu
c2 conv in=4 out=4 k=3 stride=1 pad=1
b2 batchnorm features=4
add1 add skip=r1
r2 activation fn=relu
pool pool kind=global_avg
fc linear in=4 out=3
out output
edge in c1
edge c1 b1
edge b1 r1
edge r1 c2
edge c2 b2
edge b2 add1
edge r1 add1
edge add1 r2
edge r2 pool
edge pool fc
edge fc out
";

    const CHAIN_NET: &str = "\
in input shape=3x8x8
c1 conv in=3 out=4 k=3 stride=1 pad=1
r1 activation fn=relu
pool pool kind=global_avg
fc linear in=4 out=3
out output
edge in c1
edge c1 r1
edge r1 pool
edge pool fc
edge fc out
";

    const LINEAR_NET: &str = "\
in input shape=8x1x1
fc linear in=8 out=2
out output
edge in fc
edge fc out
";

    fn net<F: Scalar>(text: &str, seed: u64) -> Network<F> {
        let arch = parse_arch(text).unwrap();
        Network::init(&arch, &mut rng::stream(seed, labels::INIT, 0)).unwrap()
    }

    fn unit_x<F: Scalar>(b: usize, c: usize, h: usize, seed: u64) -> Array4<F> {
        let mut r = rng::stream(seed, labels::DATA, 0);
        Array4::from_shape_simple_fn((b, c, h, h), || F::sample_unit(&mut r))
    }

    #[test]
    fn eps_zero_attacks_are_noops() {
        let model = net::<f32>(RES_NET, 1);
        let x = unit_x::<f32>(4, 3, 8, 2);
        let y = vec![0usize, 1, 2, 0];
        for method in [AttackMethod::Pgd, AttackMethod::Mdi2Fgsm, AttackMethod::Sgm] {
            for loss in [AttackLoss::CrossEntropy, AttackLoss::Cw] {
                let mut spec = AttackSpec::blackbox(method, loss, 0.0);
                spec.steps = 5;
                let mut r = rng::stream(3, labels::ATTACK, 0);
                let out = attack(&model, &x, &y, &spec, &mut r).unwrap();
                for v in &out.versions {
                    assert_eq!(v.as_slice().unwrap(), x.as_slice().unwrap(), "{method:?}/{loss:?}");
                }
            }
        }
    }

    #[test]
    fn single_step_on_linear_model_matches_closed_form() {
        let model = net::<f64>(LINEAR_NET, 4);
        // interior inputs so the [0,1] clamp never binds
        let mut r = rng::stream(5, labels::DATA, 0);
        let x = Array4::from_shape_simple_fn((4, 8, 1, 1), || 0.3 + 0.4 * f64::sample_unit(&mut r));
        let y = vec![0usize, 1, 0, 1];
        let eps = 0.1;
        let spec = AttackSpec {
            steps: 1,
            step_size: eps,
            random_starts: 1,
            random_start_init: false,
            ..AttackSpec::new(AttackMethod::Pgd, AttackLoss::CrossEntropy, eps)
        };
        let mut stream = rng::stream(6, labels::ATTACK, 0);
        let out = attack(&model, &x, &y, &spec, &mut stream).unwrap();
        let adv = &out.versions[0];

        // closed form: x + eps * sign(w_other - w_true)
        let w = match &model.params.units[0] {
            crate::graph::Unit::Linear(l) => l.weight.clone(),
            _ => unreachable!(),
        };
        for (bi, &label) in y.iter().enumerate() {
            for d in 0..8 {
                let diff = w[[1 - label, d]] - w[[label, d]];
                if diff.abs() < 1e-12 {
                    continue;
                }
                let want = x[[bi, d, 0, 0]] + eps * diff.signum();
                let got = adv[[bi, d, 0, 0]];
                assert!(
                    (got - want).abs() < 1e-12,
                    "sample {bi} dim {d}: got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn cw_margin_gradient_matches_central_differences() {
        let mut r = rng::stream(7, labels::DATA, 0);
        let logits =
            Array2::from_shape_simple_fn((5, 4), || 2.0 * f64::sample_unit(&mut r) - 1.0);
        let y = vec![0usize, 1, 2, 3, 0];
        let (_, analytic) = ops::cw_margin_with_grad(&logits, &y, 0.0).unwrap();
        let f = |ls: &[f64]| {
            let la = Array2::from_shape_vec(logits.raw_dim(), ls.to_vec()).unwrap();
            ops::cw_margin_loss(&la, &y, 0.0).unwrap()
        };
        let numeric = numerical_grad(f, logits.as_slice().unwrap(), 1e-6);
        let err = max_rel_err(analytic.as_slice().unwrap(), &numeric, 1e-6);
        assert!(err <= 1e-3, "rel err {err}");
        assert!(err < 1e-7, "expected near-exact for piecewise-linear loss, got {err}");
    }

    #[test]
    fn already_misclassified_sample_clamps_at_zero_kappa() {
        let logits = Array2::from_shape_vec((1, 3), vec![0.1, 2.0, -0.3]).unwrap();
        let (loss, grad) = ops::cw_margin_with_grad(&logits, &[0], 0.0).unwrap();
        assert!(loss <= 0.0);
        // margin = 0.1 - 2.0 = -1.9 < -kappa=0 -> clamped, zero gradient
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn one_hot_correct_margin_equals_m() {
        let logits = Array2::from_shape_vec((1, 3), vec![3.0, 1.0, 0.5]).unwrap();
        let loss: f64 = ops::cw_margin_loss(&logits, &[0], 1000.0).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constraints_hold_for_every_method_and_loss() {
        let model = net::<f32>(RES_NET, 8);
        let x = unit_x::<f32>(3, 3, 8, 9);
        let y = vec![0usize, 1, 2];
        for method in [AttackMethod::Pgd, AttackMethod::Mdi2Fgsm, AttackMethod::Sgm] {
            for loss in [AttackLoss::CrossEntropy, AttackLoss::Cw] {
                for eps in [0.03f64, 0.3] {
                    let mut spec = AttackSpec::blackbox(method, loss, eps);
                    spec.steps = 8;
                    let mut r = rng::stream(10, labels::ATTACK, 0);
                    let out = attack(&model, &x, &y, &spec, &mut r).unwrap();
                    for v in &out.versions {
                        for (a, o) in v.iter().zip(x.iter()) {
                            assert!((a - o).abs() <= eps as f32 + 0.0, "ball violated");
                            assert!((0.0..=1.0).contains(a), "range violated");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn resize_pad_backprop_is_the_exact_adjoint() {
        let mut r = rng::stream(11, labels::ATTACK, 0);
        for _ in 0..10 {
            let t = ResizePad::sample(8, 8, 0.7, &mut r);
            let x = unit_x::<f64>(2, 3, 8, 12);
            let dy = unit_x::<f64>(2, 3, 8, 13);
            let tx = t.apply(&x);
            let tty = t.backprop(&dy);
            let lhs: f64 = (&tx * &dy).sum();
            let rhs: f64 = (&x * &tty).sum();
            assert!((lhs - rhs).abs() < 1e-12, "adjoint identity violated: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn sgm_without_skips_falls_back_with_flag() {
        let model = net::<f32>(CHAIN_NET, 14);
        let x = unit_x::<f32>(2, 3, 8, 15);
        let y = vec![0usize, 1];
        let mut spec = AttackSpec::blackbox(AttackMethod::Sgm, AttackLoss::CrossEntropy, 0.03);
        spec.steps = 3;
        let mut r = rng::stream(16, labels::ATTACK, 0);
        let out = attack(&model, &x, &y, &spec, &mut r).unwrap();
        assert!(out.sgm_fell_back);
        let model2 = net::<f32>(RES_NET, 14);
        let out2 = attack(&model2, &x, &y, &spec, &mut r).unwrap();
        assert!(!out2.sgm_fell_back);
    }

    #[test]
    fn all_or_nothing_basics() {
        // single attack equals that attack's accuracy
        let flags = vec![vec![true], vec![false], vec![true], vec![true]];
        assert!((all_or_nothing(&flags).unwrap() - 0.75).abs() < 1e-12);
        // all true -> 1.0
        let flags = vec![vec![true, true], vec![true, true]];
        assert!((all_or_nothing(&flags).unwrap() - 1.0).abs() < 1e-12);
        // empty attack axis is an error
        assert!(all_or_nothing(&[Vec::new()]).is_err());
    }

    #[test]
    fn all_or_nothing_bounded_by_min_single_attack() {
        let mut r = rng::stream(17, labels::ATTACK, 0);
        for case in 0..200 {
            let n = 1 + (case % 13);
            let a = 1 + (case % 5);
            let flags: Vec<Vec<bool>> = (0..n)
                .map(|_| (0..a).map(|_| r.random::<f64>() > 0.4).collect())
                .collect();
            let aon = all_or_nothing(&flags).unwrap();
            for col in 0..a {
                let single = flags.iter().filter(|row| row[col]).count() as f64 / n as f64;
                assert!(aon <= single + 1e-12, "aon {aon} > single {single}");
            }
            // adding an attack column never increases accuracy
            let extended: Vec<Vec<bool>> = flags
                .iter()
                .map(|row| {
                    let mut r2 = row.clone();
                    r2.push(true);
                    r2
                })
                .collect();
            assert!((all_or_nothing(&extended).unwrap() - aon).abs() < 1e-12);
        }
    }

    #[test]
    fn blackbox_inventory_counts() {
        let model = net::<f32>(RES_NET, 18);
        let s1 = net::<f32>(RES_NET, 19);
        let s2 = net::<f32>(RES_NET, 20);
        let s3 = net::<f32>(RES_NET, 21);
        let x = unit_x::<f32>(2, 3, 8, 22);
        let y = vec![0usize, 1];
        // shrink steps for test speed; the count is what matters here
        let target = NamedModel { id: "target".into(), model: &model };
        let surrogates = [
            NamedModel { id: "s1".into(), model: &s1 as &dyn Classifier<f32> },
            NamedModel { id: "s2".into(), model: &s2 },
            NamedModel { id: "s3".into(), model: &s3 },
        ];
        let report =
            blackbox_protocol(&target, &surrogates, &[0.01], &x, &y, 7, None).unwrap();
        assert_eq!(report.attack_inventory.len(), 30);
        let report1 =
            blackbox_protocol(&target, &surrogates[..1], &[0.01], &x, &y, 7, None).unwrap();
        assert_eq!(report1.attack_inventory.len(), 10);
    }

    #[test]
    fn whitebox_at_eps_zero_equals_clean_accuracy() {
        let model = net::<f32>(RES_NET, 23);
        let x = unit_x::<f32>(16, 3, 8, 24);
        let y: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let target = NamedModel { id: "m".into(), model: &model };
        let report = whitebox_protocol(&target, &[0.0], &x, &y, 3).unwrap();
        assert_eq!(report.attack_inventory.len(), 5);
        assert!((report.rows[0].accuracy - report.clean_accuracy).abs() < 1e-12);
    }

    #[test]
    fn transfer_matrix_identical_models_and_eps_zero() {
        let model = net::<f32>(RES_NET, 25);
        let copy = model.clone();
        let x = unit_x::<f32>(12, 3, 8, 26);
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let mut spec = AttackSpec::new(AttackMethod::Pgd, AttackLoss::CrossEntropy, 0.1);
        spec.steps = 10;
        spec.step_size = 0.02;
        let models = [
            NamedModel { id: "a".into(), model: &model as &dyn Classifier<f32> },
            NamedModel { id: "b".into(), model: &copy },
        ];
        let tm = transfer_matrix(&models, &spec, &x, &y, 5).unwrap();
        // identical models: cross entries equal own-diagonal entries
        assert!((tm.rates[0][1] - tm.rates[0][0]).abs() < 1e-12);
        assert!((tm.rates[1][0] - tm.rates[1][1]).abs() < 1e-12);

        let spec0 = AttackSpec { eps: 0.0, ..spec };
        let tm0 = transfer_matrix(&models, &spec0, &x, &y, 5).unwrap();
        for row in &tm0.rates {
            for &v in row {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn attacks_are_seed_reproducible() {
        let model = net::<f32>(RES_NET, 27);
        let x = unit_x::<f32>(3, 3, 8, 28);
        let y = vec![0usize, 1, 2];
        let mut spec = AttackSpec::blackbox(AttackMethod::Mdi2Fgsm, AttackLoss::Cw, 0.05);
        spec.steps = 6;
        let a = attack(&model, &x, &y, &spec, &mut rng::stream(9, labels::ATTACK, 1)).unwrap();
        let b = attack(&model, &x, &y, &spec, &mut rng::stream(9, labels::ATTACK, 1)).unwrap();
        for (va, vb) in a.versions.iter().zip(b.versions.iter()) {
            assert_eq!(va.as_slice().unwrap(), vb.as_slice().unwrap());
        }
    }

    #[test]
    fn whitebox_attack_degrades_untrained_model() {
        let model = net::<f32>(RES_NET, 29);
        let x = unit_x::<f32>(32, 3, 8, 30);
        let y: Vec<usize> = (0..32).map(|i| i % 3).collect();
        let target = NamedModel { id: "m".into(), model: &model };
        let report = whitebox_protocol(&target, &[0.03], &x, &y, 11).unwrap();
        assert!(
            report.rows[0].accuracy <= report.clean_accuracy,
            "adversarial accuracy above clean"
        );
    }

    #[test]
    fn pgd_on_rgn_path_view_works() {
        let arch = parse_arch(RES_NET).unwrap();
        let scope = make_scope(&arch, ScopeMode::All).unwrap();
        let spec = build_rgn_spec(&arch, scope, 2).unwrap();
        let rgn = RgnModel::<f32>::init(spec, &mut rng::stream(31, labels::INIT, 0)).unwrap();
        let view = crate::rgn::PathView { rgn: &rgn, path: Path::new(vec![0, 1]) };
        let x = unit_x::<f32>(2, 3, 8, 32);
        let y = vec![0usize, 2];
        let mut spec = AttackSpec::whitebox(0.03);
        spec.steps = 5;
        let mut r = rng::stream(33, labels::ATTACK, 0);
        let out = attack(&view, &x, &y, &spec, &mut r).unwrap();
        assert_eq!(out.versions.len(), 5);
    }

    #[test]
    fn linear_model_forward_through_flatten() {
        let model = net::<f64>(LINEAR_NET, 34);
        let x = unit_x::<f64>(3, 8, 1, 35);
        let logits = model.logits(&x).unwrap();
        assert_eq!(logits.shape(), [3, 2]);
        let w = match &model.params.units[0] {
            crate::graph::Unit::Linear(l) => l,
            _ => unreachable!(),
        };
        let flat = Feature::Map(x.clone()).to_flat();
        let want = w.forward(&flat).unwrap();
        assert_eq!(logits, want);
        let _ = Array1::<f64>::zeros(1);
    }
}
