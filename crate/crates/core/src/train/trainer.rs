//! Training state and a single teacher–student update.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_view_bundle, BundleConfig, SampleGroup, ViewBundle};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::optim::{Parameters, Sgd};
use crate::strata::mix_seed;
use crate::tensor::{Tensor, TensorError};
use crate::vit::{collect_grads, encode, ModelSize, ViTConfig};

use super::heads::{HeadConfig, Network, NetworkVars, ProjectionHead, ProtoDistribution};
use super::losses::{marginal_entropy, LossReport, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

/// How raw teacher logits become targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherNorm {
    /// Subtract the running center, then sharpen with `tau_teacher`.
    #[default]
    Center,
    /// Sharpen with `tau_teacher`, then balance the batch with a few
    /// Sinkhorn–Knopp iterations so every prototype receives equal mass.
    Sinkhorn,
}

/// Sinkhorn–Knopp iterations used by [`TeacherNorm::Sinkhorn`].
pub const SINKHORN_ITERATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub vit: ViTConfig,
    pub head: HeadConfig,
    pub bundle: BundleConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    /// Teacher EMA momentum `m`.
    pub ema_momentum: f64,
    pub tau_teacher: f64,
    pub tau_student: f64,
    pub center_momentum: f64,
    #[serde(default)]
    pub teacher_norm: TeacherNorm,
    pub weights: LossWeights,
    /// Whether the masked global views enter the class-token loss.
    pub masked_in_classtoken: bool,
    /// First step of the second phase, if any.
    pub phase2_step: Option<u64>,
    /// Global crop size during the second phase.
    pub phase2_global_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vit: ModelSize::Small.config(),
            head: HeadConfig {
                hidden_dim: 256,
                prototypes: 1024,
            },
            bundle: BundleConfig::default(),
            batch_size: 8,
            steps: 100,
            lr: 0.03,
            momentum: 0.9,
            lr_schedule: LrSchedule::Constant,
            ema_momentum: 0.992,
            tau_teacher: 0.04,
            tau_student: 0.1,
            center_momentum: 0.9,
            teacher_norm: TeacherNorm::Center,
            weights: LossWeights::default(),
            masked_in_classtoken: true,
            phase2_step: None,
            phase2_global_size: 518,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

fn config_err(msg: String) -> Error {
    Error::Config(msg)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.bundle.validate()?;
        self.weights.validate()?;
        if self.bundle.patch_size != self.vit.patch_size {
            return Err(config_err(format!(
                "crop patch size {} differs from the backbone patch size {}",
                self.bundle.patch_size, self.vit.patch_size
            )));
        }
        if self.head.prototypes < 2 || self.head.hidden_dim == 0 {
            return Err(config_err(format!(
                "head needs hidden_dim ≥ 1 and prototypes ≥ 2, got {:?}",
                self.head
            )));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch size must be positive".into()));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(config_err(format!(
                "EMA momentum must lie in (0, 1), got {}",
                self.ema_momentum
            )));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(config_err(format!(
                "center momentum must lie in [0, 1), got {}",
                self.center_momentum
            )));
        }
        for (name, t) in [("teacher", self.tau_teacher), ("student", self.tau_student)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(config_err(format!(
                    "{name} temperature must be positive, got {t}"
                )));
            }
        }
        Sgd::new(self.lr, self.momentum)?;
        if self.phase2_step.is_some() {
            let p = self.vit.patch_size;
            if self.phase2_global_size == 0 || !self.phase2_global_size.is_multiple_of(p) {
                return Err(config_err(format!(
                    "second-phase global size {} must be a positive multiple of the patch size {p}",
                    self.phase2_global_size
                )));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / self.steps.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }

    /// Crop settings in effect at `step`.
    pub fn bundle_at(&self, step: u64) -> BundleConfig {
        let mut b = self.bundle.clone();
        if self.phase2_step.is_some_and(|s| step >= s) {
            b.global_size = self.phase2_global_size;
        }
        b
    }
}

/// Student and teacher networks with their optimizer and centering state.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub student: Network,
    pub teacher: Network,
    pub optimizer: Sgd,
    pub class_center: Tensor,
    pub patch_center: Tensor,
    /// Number of completed updates.
    pub step: u64,
}

impl TrainerState {
    /// Fresh state: a seeded student and a teacher that starts as its copy.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let student = Network::init(config.vit, config.head, &mut rng)?;
        let mut teacher = student.clone();
        teacher.set_requires_grad(false);
        let k = config.head.prototypes;
        let optimizer = Sgd::new(config.lr, config.momentum)?;
        Ok(Self {
            config,
            student,
            teacher,
            optimizer,
            class_center: Tensor::zeros(&[k]),
            patch_center: Tensor::zeros(&[k]),
            step: 0,
        })
    }
}

/// `θ_t ← m·θ_t + (1−m)·θ_s` for every teacher tensor. Entries where the two
/// networks agree are left bit-identical, and results are clamped to the
/// interval between the old teacher and the student value.
pub fn ema_update(teacher: &mut dyn Parameters, student: &dyn Parameters, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(config_err(format!(
            "EMA momentum must lie in [0, 1], got {m}"
        )));
    }
    let sources: Vec<(String, &Tensor)> = student.named();
    let mut idx = 0;
    let mut err = None;
    teacher.visit_mut(&mut |name, t| {
        let Some((sname, s)) = sources.get(idx) else {
            err.get_or_insert_with(|| Error::Internal(format!("student has no tensor for {name}")));
            return;
        };
        idx += 1;
        if s.shape() != t.shape() {
            err.get_or_insert_with(|| {
                Error::Internal(format!(
                    "EMA shape mismatch: {name} {:?} vs {sname} {:?}",
                    t.shape(),
                    s.shape()
                ))
            });
            return;
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            if *tv != sv {
                let v = m * *tv + (1.0 - m) * sv;
                *tv = v.clamp(tv.min(sv), tv.max(sv));
            }
        }
    });
    if idx != sources.len() && err.is_none() {
        err = Some(Error::Internal(
            "teacher and student differ in tensor count".into(),
        ));
    }
    err.map_or(Ok(()), Err)
}

/// `c ← λ·c + (1−λ)·mean_rows(logits)`.
pub fn center_update(center: &mut Tensor, logits: &Tensor, lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(config_err(format!(
            "center momentum must lie in [0, 1), got {lambda}"
        )));
    }
    let k = center.numel();
    if logits.last_dim() != k {
        return Err(Error::Internal(format!(
            "center of length {k} for logits {:?}",
            logits.shape()
        )));
    }
    let rows = logits.rows();
    let mut mean = vec![0.0; k];
    for r in 0..rows {
        mean.iter_mut()
            .zip(logits.row(r))
            .for_each(|(m, &l)| *m += l);
    }
    for (c, m) in center.data_mut().iter_mut().zip(mean) {
        *c = lambda * *c + (1.0 - lambda) * (m / rows as f64);
    }
    Ok(())
}

/// Teacher targets, one row per logit row: centered and sharpened, or
/// sharpened and batch-balanced.
fn teacher_targets(
    logits: &Tensor,
    center: &Tensor,
    tau: f64,
    norm: TeacherNorm,
) -> Result<Vec<ProtoDistribution>> {
    match norm {
        TeacherNorm::Center => (0..logits.rows())
            .map(|r| {
                let centered: Vec<f64> = logits
                    .row(r)
                    .iter()
                    .zip(center.data())
                    .map(|(l, c)| l - c)
                    .collect();
                Ok(ProtoDistribution::from_logits(&centered, tau)?)
            })
            .collect(),
        TeacherNorm::Sinkhorn => sinkhorn(logits, tau, SINKHORN_ITERATIONS)?
            .chunks(logits.last_dim())
            .map(|row| Ok(ProtoDistribution::new(row.to_vec())?))
            .collect(),
    }
}

/// Sinkhorn–Knopp balancing of `exp(logits / tau)`: alternately gives every
/// prototype column mass `1/K` and every row mass `1/B`, ending on rows,
/// then rescales rows to sum to one. Row-major `[B, K]`.
pub fn sinkhorn(logits: &Tensor, tau: f64, iterations: usize) -> Result<Vec<f64>> {
    let (b, k) = (logits.rows(), logits.last_dim());
    let max = logits
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = logits
        .data()
        .iter()
        .map(|&l| ((l - max) / tau).exp())
        .collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    for _ in 0..iterations {
        for j in 0..k {
            let col: f64 = (0..b).map(|i| q[i * k + j]).sum();
            if col > 0.0 {
                (0..b).for_each(|i| q[i * k + j] /= col * k as f64);
            }
        }
        for row in q.chunks_mut(k) {
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum * b as f64);
        }
    }
    q.iter_mut().for_each(|v| *v *= b as f64);
    if !q.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite Sinkhorn targets".into()));
    }
    // Renormalize each row exactly onto the simplex.
    for row in q.chunks_mut(k) {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(q)
}

fn stack(dists: &[&ProtoDistribution]) -> Result<Tensor> {
    let k = dists[0].k();
    let data = dists
        .iter()
        .flat_map(|d| d.values().iter().copied())
        .collect();
    Ok(Tensor::new(vec![dists.len(), k], data)?)
}

/// Rows of `patches` `[N·G², D]` at the masked positions of each view, in
/// view order, together with how many rows belong to each view.
fn masked_rows(masks: &[&[usize]], cells: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut counts = Vec::with_capacity(masks.len());
    for (v, m) in masks.iter().enumerate() {
        rows.extend(m.iter().map(|&i| v * cells + i));
        counts.push(m.len());
    }
    (rows, counts)
}

/// Mean soft cross-entropy over `(target, student row)` pairs, or `None` when there are no pairs.
fn pair_loss(
    g: &mut Graph,
    logits: Var,
    pairs: &[(&ProtoDistribution, usize)],
    tau: f64,
) -> Result<Option<Var>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let targets = stack(&pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let picked = g.gather_rows(logits, &rows)?;
    Ok(Some(g.soft_cross_entropy(&targets, picked, tau)?))
}

/// Raw teacher logits for a batch: class tokens of every unmasked global
/// view, and patch tokens at the masked positions of their masked twins.
struct TeacherLogits {
    class: Tensor,
    patch: Option<Tensor>,
    cells: usize,
}

fn check_view_counts(bundles: &[ViewBundle]) -> Result<(usize, usize)> {
    let first = bundles
        .first()
        .ok_or_else(|| config_err("empty batch".into()))?;
    let (n_globals, n_local) = (first.teacher_globals.len(), first.local_crops.len());
    if bundles
        .iter()
        .any(|x| x.teacher_globals.len() != n_globals || x.masked_globals.len() != n_globals)
    {
        return Err(Error::Data("bundles differ in global view counts".into()));
    }
    if bundles.iter().any(|x| x.local_crops.len() != n_local) {
        return Err(Error::Data("bundles differ in local view counts".into()));
    }
    Ok((n_globals, n_local))
}

fn batch_masks(bundles: &[ViewBundle]) -> Vec<&[usize]> {
    bundles
        .iter()
        .flat_map(|x| x.masked_globals.iter().map(|m| m.mask.as_slice()))
        .collect()
}

fn teacher_logits(teacher: &Network, bundles: &[ViewBundle], step: u64) -> Result<TeacherLogits> {
    check_view_counts(bundles)?;
    let vit = teacher.backbone.config;
    let teacher_imgs: Vec<&Image> = bundles.iter().flat_map(|x| &x.teacher_globals).collect();
    let masks = batch_masks(bundles);
    let mut g = Graph::no_grad();
    let v = teacher.bind(&mut g);
    let enc = encode(&mut g, &v.backbone, &vit, &teacher_imgs, &[])?;
    let cells = enc.grid * enc.grid;
    let cls = ProjectionHead::forward(&mut g, &v.class_head, enc.cls)?;
    let (rows, _) = masked_rows(&masks, cells);
    let patch = if rows.is_empty() {
        None
    } else {
        let picked = g.gather_rows(enc.patches, &rows)?;
        let out = ProjectionHead::forward(&mut g, &v.patch_head, picked)?;
        Some(g.value(out).clone())
    };
    let class = g.value(cls).clone();
    if !class.is_finite() || patch.as_ref().is_some_and(|t| !t.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite teacher output at step {step}"
        )));
    }
    Ok(TeacherLogits {
        class,
        patch,
        cells,
    })
}

/// Centered, sharpened teacher distributions for one batch; constants as
/// far as the student's gradient is concerned.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    pub class: Vec<ProtoDistribution>,
    pub patch: Vec<ProtoDistribution>,
    /// Patch cells per global view.
    pub cells: usize,
}

impl BatchTargets {
    fn from_logits(logits: &TeacherLogits, state: &TrainerState) -> Result<Self> {
        let (tau, norm) = (state.config.tau_teacher, state.config.teacher_norm);
        let class = teacher_targets(&logits.class, &state.class_center, tau, norm)?;
        let patch = match &logits.patch {
            Some(l) => teacher_targets(l, &state.patch_center, tau, norm)?,
            None => Vec::new(),
        };
        Ok(Self {
            class,
            patch,
            cells: logits.cells,
        })
    }
}

/// Teacher targets for `bundles` under the state's current centers.
pub fn batch_targets(state: &TrainerState, bundles: &[ViewBundle]) -> Result<BatchTargets> {
    BatchTargets::from_logits(&teacher_logits(&state.teacher, bundles, state.step)?, state)
}

/// The student's side of one update: the recorded graph, the bound
/// parameters and the weighted total loss (`None` when every weighted term
/// is absent), with the unweighted term values.
pub struct StudentObjective {
    pub graph: Graph,
    pub vars: NetworkVars,
    pub total: Option<Var>,
    pub l_classtoken: f64,
    pub l_season: f64,
    pub l_patch: f64,
}

/// Records the student forward pass and all three losses against fixed
/// teacher targets.
pub fn student_objective(
    student: &Network,
    cfg: &TrainConfig,
    bundles: &[ViewBundle],
    targets: &BatchTargets,
) -> Result<StudentObjective> {
    let (n_globals, n_local) = check_view_counts(bundles)?;
    let b = bundles.len();
    let vit = student.backbone.config;
    let masks = batch_masks(bundles);
    let (t_class, t_patch, cells) = (&targets.class, &targets.patch, targets.cells);

    // Student: masked globals, local crops and seasonal views.
    let mut g = Graph::new();
    let sv = student.bind(&mut g);
    let masked_imgs: Vec<&Image> = bundles
        .iter()
        .flat_map(|x| x.masked_globals.iter().map(|m| &m.image))
        .collect();
    let enc_m = encode(&mut g, &sv.backbone, &vit, &masked_imgs, &masks)?;
    let local_imgs: Vec<&Image> = bundles.iter().flat_map(|x| &x.local_crops).collect();
    let seasonal_imgs: Vec<&Image> = bundles.iter().flat_map(|x| &x.seasonal_views).collect();

    // Class-token logits of every student view, stacked: masked, local, seasonal.
    let mut cls_parts = vec![enc_m.cls];
    if !local_imgs.is_empty() {
        cls_parts.push(encode(&mut g, &sv.backbone, &vit, &local_imgs, &[])?.cls);
    }
    if !seasonal_imgs.is_empty() {
        cls_parts.push(encode(&mut g, &sv.backbone, &vit, &seasonal_imgs, &[])?.cls);
    }
    let cls = if cls_parts.len() == 1 {
        cls_parts[0]
    } else {
        g.concat_rows(&cls_parts)?
    };
    let s_class = ProjectionHead::forward(&mut g, &sv.class_head, cls)?;
    let local_base = masked_imgs.len();
    let seasonal_base = local_base + local_imgs.len();

    let mut class_pairs = Vec::new();
    let mut season_pairs = Vec::new();
    let mut seasonal_row = seasonal_base;
    for (n, bundle) in bundles.iter().enumerate() {
        let teachers = &t_class[n * n_globals..(n + 1) * n_globals];
        for l in 0..n_local {
            for t in teachers {
                class_pairs.push((t, local_base + n * n_local + l));
            }
        }
        if cfg.masked_in_classtoken {
            for j in 0..n_globals {
                for (i, t) in teachers.iter().enumerate() {
                    if i != j {
                        class_pairs.push((t, n * n_globals + j));
                    }
                }
            }
        }
        for _ in &bundle.seasonal_views {
            for t in teachers {
                season_pairs.push((t, seasonal_row));
            }
            seasonal_row += 1;
        }
    }
    let l_class = pair_loss(&mut g, s_class, &class_pairs, cfg.tau_student)?;
    // Averaged over the bundles that carry seasonal views, so the term does
    // not fluctuate with how many of them a batch happens to contain.
    let l_season = pair_loss(&mut g, s_class, &season_pairs, cfg.tau_student)?;

    // Patch loss: per-bundle mean over masked cells, averaged over the batch.
    let (rows, counts) = masked_rows(&masks, cells);
    let mut l_patch = None;
    if !rows.is_empty() {
        let picked = g.gather_rows(enc_m.patches, &rows)?;
        let s_patch = ProjectionHead::forward(&mut g, &sv.patch_head, picked)?;
        let mut offset = 0;
        for n in 0..b {
            let count: usize = counts[n * n_globals..(n + 1) * n_globals].iter().sum();
            let pairs: Vec<(&ProtoDistribution, usize)> =
                (offset..offset + count).map(|r| (&t_patch[r], r)).collect();
            offset += count;
            if let Some(term) = pair_loss(&mut g, s_patch, &pairs, cfg.tau_student)? {
                let term = g.scale(term, 1.0 / b as f64);
                l_patch = Some(match l_patch {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
        }
    }

    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let (lc, ls, lp) = (value(&g, l_class), value(&g, l_season), value(&g, l_patch));
    let mut total: Option<Var> = None;
    for (term, w) in [
        (l_class, cfg.weights.classtoken),
        (l_season, cfg.weights.season),
        (l_patch, cfg.weights.patch),
    ] {
        if let Some(t) = term.filter(|_| w != 0.0) {
            let t = g.scale(t, w);
            total = Some(match total {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
    }
    Ok(StudentObjective {
        graph: g,
        vars: sv,
        total,
        l_classtoken: lc,
        l_season: ls,
        l_patch: lp,
    })
}

/// One update on a batch of view bundles: teacher targets without gradient,
/// student forward and backward, SGD, center updates and the teacher EMA.
pub fn train_step(state: &mut TrainerState, bundles: &[ViewBundle]) -> Result<LossReport> {
    let cfg = state.config.clone();
    let logits = teacher_logits(&state.teacher, bundles, state.step)?;
    if state.step == 0 {
        // Start the running centers at the first batch mean rather than zero,
        // so the shared logit component never dominates the first targets.
        center_update(&mut state.class_center, &logits.class, 0.0)?;
        if let Some(l) = &logits.patch {
            center_update(&mut state.patch_center, l, 0.0)?;
        }
    }
    let targets = BatchTargets::from_logits(&logits, state)?;
    let teacher_entropy = marginal_entropy(&targets.class);

    let objective = student_objective(&state.student, &cfg, bundles, &targets)?;
    let report = LossReport::new(
        objective.l_classtoken,
        objective.l_season,
        objective.l_patch,
        &cfg.weights,
        teacher_entropy,
    );
    if ![
        report.l_classtoken,
        report.l_season,
        report.l_patch,
        report.l_total,
    ]
    .iter()
    .all(|x| x.is_finite())
    {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {}: {report:?}",
            state.step
        )));
    }
    let StudentObjective {
        mut graph,
        vars,
        total,
        ..
    } = objective;
    if let Some(total) = total {
        graph.backward(total).map_err(|e| match e {
            TensorError::NonFinite(_) => {
                Error::Numeric(format!("non-finite loss at step {}", state.step))
            }
            e => e.into(),
        })?;
        collect_grads(&mut state.student, &graph, &vars.ordered())
            .map_err(|e| Error::Numeric(format!("step {}: {e}", state.step)))?;
        state.optimizer.lr = cfg.lr_at(state.step);
        state.optimizer.step(&mut state.student)?;
    }
    drop(graph);

    center_update(&mut state.class_center, &logits.class, cfg.center_momentum)?;
    if let Some(l) = &logits.patch {
        center_update(&mut state.patch_center, l, cfg.center_momentum)?;
    }
    ema_update(&mut state.teacher, &state.student, cfg.ema_momentum)?;
    state.step += 1;
    if !state.student.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite student parameters after step {}",
            state.step
        )));
    }
    Ok(report)
}

/// Sample group indices for `step`: the dataset is visited in a seeded
/// random order that is reshuffled every epoch.
pub fn batch_indices(
    n_groups: usize,
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Vec<(usize, u64)> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + j;
        let epoch = pos / n_groups as u64;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..n_groups).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch));
            order.shuffle(&mut rng);
            cached = Some((epoch, order));
        }
        let order = &cached.as_ref().expect("cached epoch").1;
        out.push((
            order[(pos % n_groups as u64) as usize],
            mix_seed(seed ^ 0x5eed, pos),
        ));
    }
    out
}

/// View bundles for `step`; a pure function of the dataset, config and step.
pub fn bundles_for_step(
    groups: &[SampleGroup],
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<ViewBundle>> {
    if groups.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    let bundle_cfg = cfg.bundle_at(step);
    batch_indices(groups.len(), cfg.batch_size, cfg.seed, step)
        .into_iter()
        .map(|(i, seed)| Ok(build_view_bundle(&groups[i], &bundle_cfg, seed)?))
        .collect()
}
