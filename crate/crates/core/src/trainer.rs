//! Training loops: teacher pretraining, joint factorization, CKN transfer
//! finetuning, and evaluation.
//!
//! One optimizer step updates the CKN, every TSN, both heads per task and
//! the critic FFN against the total objective; the teacher is never touched.
//! All loops are deterministic given (data, configs, seed).

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KfError, Result};
use crate::losses::{
    self, dv_lower_bound_with_grad, kl_feature_grad, soft_target_kd_with_grad,
    supervised_loss_with_grad, FactorizationConfig, TaskTarget,
};
use crate::models::{
    forward_aux_head, forward_head, Backbone, BackboneSpec, CriticAligner, FactorNetwork,
    SharedBackbone, TeacherModel,
};
use crate::nn::layers::Dense;
use crate::nn::optim::{Adam, LrSchedule, Optimizer, OptimizerKind, Sgd};
use crate::nn::{ParamVisitor, Parameterized};
use crate::synthdata::{DatasetSplit, LabeledSample};

/// Gradient clipping threshold (global norm) for factorization steps.
const GRAD_CLIP: f64 = 10.0;

/// Optimization settings for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_schedule() -> LrSchedule {
    LrSchedule::None
}

impl TrainConfig {
    /// Adam, lr 1e-4, weight decay 1e-4, batch 128: the synthetic-dataset
    /// defaults.
    pub fn synthetic_default(epochs: usize, seed: u64) -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            momentum: default_momentum(),
            betas: default_betas(),
            weight_decay: 1e-4,
            batch_size: 128,
            epochs,
            schedule: LrSchedule::None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(KfError::invalid("learning_rate must be > 0"));
        }
        if self.batch_size < 2 {
            return Err(KfError::invalid(
                "batch_size must be >= 2 (the DV bound needs marginal pairs)",
            ));
        }
        Ok(())
    }

    fn make_optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::SgdMomentum => Optimizer::Sgd(Sgd::new(self.momentum, self.weight_decay)),
            OptimizerKind::Adam => {
                let mut adam = Adam::new(self.weight_decay);
                adam.beta1 = self.betas.0;
                adam.beta2 = self.betas.1;
                Optimizer::Adam(adam)
            }
        }
    }
}

/// One appended scalar: (step, series name, value).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub name: String,
    pub value: f64,
}

/// Append-only metrics log.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, step: usize, name: impl Into<String>, value: f64) {
        self.records.push(LogRecord { step, name: name.into(), value });
    }

    /// Distinct series names, excluding the recombined total.
    pub fn component_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .records
            .iter()
            .map(|r| r.name.clone())
            .filter(|n| n != "total")
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn series(&self, name: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.name == name)
            .map(|r| (r.step, r.value))
            .collect()
    }

    /// Line-delimited JSON rendering.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Stack samples (by index) into an input tensor plus per-task labels.
pub fn make_batch(
    samples: &[LabeledSample],
    idxs: &[usize],
    num_tasks: usize,
) -> Result<(Array4<f64>, Vec<Vec<usize>>)> {
    if idxs.is_empty() {
        return Err(KfError::invalid("empty batch"));
    }
    let (c, h, w) = samples[idxs[0]].image.dim();
    let mut x = Array4::zeros((idxs.len(), c, h, w));
    let mut labels = vec![Vec::with_capacity(idxs.len()); num_tasks];
    for (row, &i) in idxs.iter().enumerate() {
        let s = &samples[i];
        x.slice_mut(ndarray::s![row, .., .., ..]).assign(&s.image);
        for t in 0..num_tasks {
            labels[t].push(s.task_labels[t]);
        }
    }
    Ok((x, labels))
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn check_finite(value: f64, component: &str, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(KfError::TrainingFailure { component: component.to_string(), step })
    }
}

/// A trained teacher plus its training log.
#[derive(Debug)]
pub struct TrainedTeacher {
    pub model: TeacherModel,
    pub log: TrainLog,
}

/// Train a multi-head teacher by minimizing the summed per-task supervised
/// losses.
pub fn pretrain_teacher(
    data: &DatasetSplit,
    spec: &BackboneSpec,
    class_counts: &[usize],
    tcfg: &TrainConfig,
) -> Result<TrainedTeacher> {
    tcfg.validate()?;
    if class_counts.is_empty() {
        return Err(KfError::invalid("teacher needs at least one task"));
    }
    let mut model = TeacherModel::init(spec, class_counts, tcfg.seed)?;
    let mut opt = tcfg.make_optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut log = TrainLog::default();
    let num_tasks = class_counts.len();
    let mut step = 0usize;
    for epoch in 0..tcfg.epochs {
        let lr = tcfg.learning_rate * tcfg.schedule.scale_at(epoch);
        for batch in epoch_batches(data.train.len(), tcfg.batch_size, &mut rng) {
            let (x, labels) = make_batch(&data.train, &batch, num_tasks)?;
            let trace = model.backbone.forward_trace(&x)?;
            let mut d_feature = Array2::zeros(trace.feature().dim());
            let mut total = 0.0;
            for j in 0..num_tasks {
                let logits = model.heads[j].forward(trace.feature())?;
                let (loss, d_logits) =
                    supervised_loss_with_grad(&logits, &TaskTarget::Classes(&labels[j]))?;
                check_finite(loss, &format!("sup/{j}"), step)?;
                total += loss;
                d_feature += &model.heads[j].backward(trace.feature(), &d_logits);
                log.push(step, format!("sup/{j}"), loss);
            }
            check_finite(total, "total", step)?;
            log.push(step, "total", total);
            model.backbone.backward(&trace, &d_feature, &[])?;
            model.clip_grad_norm(GRAD_CLIP);
            opt.step(&mut model, lr);
            model.zero_grads();
            step += 1;
        }
    }
    Ok(TrainedTeacher { model, log })
}

/// The output of one factorization run: shared CKN, per-task factor
/// networks, the trained critic and the training log.
#[derive(Debug)]
pub struct FactorSet {
    pub ckn: SharedBackbone,
    pub factors: Vec<FactorNetwork>,
    pub critic: CriticAligner,
    pub config: FactorizationConfig,
    pub log: TrainLog,
}

impl FactorSet {
    pub fn num_tasks(&self) -> usize {
        self.factors.len()
    }
}

/// Adapter exposing every student-side parameter to one optimizer.
struct StudentParams<'a> {
    ckn: &'a mut Backbone,
    factors: &'a mut [FactorNetwork],
    critic: &'a mut CriticAligner,
}

impl Parameterized for StudentParams<'_> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.ckn.visit_params(&crate::nn::join_name(prefix, "ckn"), f);
        for factor in self.factors.iter_mut() {
            let name = format!("task{}", factor.task_id);
            factor.visit_own_params(&crate::nn::join_name(prefix, &name), f);
        }
        self.critic.visit_params(&crate::nn::join_name(prefix, "critic"), f);
    }

    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f64>)) {
        self.ckn.for_each_param(&crate::nn::join_name(prefix, "ckn"), f);
        for factor in self.factors.iter() {
            let name = format!("task{}", factor.task_id);
            factor.for_each_own_param(&crate::nn::join_name(prefix, &name), f);
        }
        self.critic.for_each_param(&crate::nn::join_name(prefix, "critic"), f);
    }
}

/// Architecture choices for the student side of a factorization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentSpecs {
    pub ckn: BackboneSpec,
    pub tsn: BackboneSpec,
    /// Hidden widths of the critic's alignment FFN.
    pub critic_hidden: Vec<usize>,
}

/// Decompose a frozen teacher into a shared CKN plus per-task factor
/// networks by minimizing sum_j L_sf^(j) - lambda_I L_I^(j).
pub fn factorize(
    teacher: &TeacherModel,
    data: &DatasetSplit,
    cfg: &FactorizationConfig,
    tcfg: &TrainConfig,
    specs: &StudentSpecs,
) -> Result<FactorSet> {
    tcfg.validate()?;
    cfg.validate()?;
    let num_tasks = teacher.num_tasks();
    if num_tasks == 0 {
        return Err(KfError::invalid("teacher has no task heads"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);

    let ckn_shared: SharedBackbone = std::rc::Rc::new(std::cell::RefCell::new(Backbone::init(
        &specs.ckn,
        tcfg.seed.wrapping_add(1),
    )?));
    let mut factors = Vec::with_capacity(num_tasks);
    for j in 0..num_tasks {
        factors.push(FactorNetwork::init(
            std::rc::Rc::clone(&ckn_shared),
            &specs.tsn,
            teacher.class_counts[j],
            j,
            tcfg.seed.wrapping_add(2 + j as u64),
        )?);
    }
    let teacher_tap = cfg.critic_layer.unwrap_or(teacher.backbone.final_tap());
    let ckn_tap = cfg.critic_layer.unwrap_or(ckn_shared.borrow().final_tap());
    let d_t = teacher.backbone.tap_dim(teacher_tap)?;
    let d_c = ckn_shared.borrow().tap_dim(ckn_tap)?;
    let mut critic = CriticAligner::init(
        d_t,
        &specs.critic_hidden,
        d_c,
        tcfg.seed.wrapping_add(1000),
    );
    critic.layer_index = cfg.critic_layer;

    let mut opt = tcfg.make_optimizer();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let k_f = num_tasks as f64;

    for epoch in 0..tcfg.epochs {
        let lr = tcfg.learning_rate * tcfg.schedule.scale_at(epoch);
        for batch in epoch_batches(data.train.len(), tcfg.batch_size, &mut rng) {
            let (x, labels) = make_batch(&data.train, &batch, num_tasks)?;
            let n = batch.len();

            // Teacher pass: frozen, no gradients ever accumulate into it.
            let (teacher_trace, teacher_logits) = teacher.forward_trace(&x)?;
            let z_teacher = teacher.backbone.tap_feature(&teacher_trace, teacher_tap)?;

            let mut ckn = ckn_shared.borrow_mut();
            let ckn_trace = ckn.forward_trace(&x)?;
            let z = ckn_trace.feature().clone();
            let z_ckn_tap = ckn.tap_feature(&ckn_trace, ckn_tap)?;

            // Critic term, shared by every task's L_I.
            let scores = critic.score_matrix(&z_teacher, &z_ckn_tap)?;
            let (dv, dv_grad) = dv_lower_bound_with_grad(&scores)
                .map_err(|_| KfError::TrainingFailure { component: "dv".into(), step })?;
            check_finite(dv, "dv", step)?;

            let mut per_task_sf = Vec::with_capacity(num_tasks);
            let mut per_task_imb = Vec::with_capacity(num_tasks);
            let mut d_z = Array2::zeros(z.dim());
            let mut tsn_backprops: Vec<(usize, Array2<f64>)> = Vec::with_capacity(num_tasks);
            let mut traces = Vec::with_capacity(num_tasks);

            for j in 0..num_tasks {
                let factor = &mut factors[j];
                let tsn_trace = factor.tsn.forward_trace(&x)?;
                let t_raw = tsn_trace.feature().clone();

                // Optional stochastic draw: t is treated as the mean of a
                // unit-variance Gaussian, t~ = t + eps. Information carried
                // by a dimension then costs KL, which concentrates each
                // task's signal into few dimensions.
                let t_used = if cfg.sample_tsn {
                    let mut eps = Array2::zeros(t_raw.dim());
                    eps.mapv_inplace(|_| rng.sample::<f64, _>(rand_distr_standard()));
                    &t_raw + &eps
                } else {
                    t_raw.clone()
                };

                let fused = forward_head(&factor.head, &z, &t_used)?;
                let aux = forward_aux_head(&factor.aux_head, &t_used)?;
                let target = TaskTarget::Classes(&labels[j]);

                let (l_sup, d_fused_sup) = supervised_loss_with_grad(&fused, &target)?;
                check_finite(l_sup, &format!("sup/{j}"), step)?;
                let (l_kt, d_fused_kt) =
                    soft_target_kd_with_grad(&teacher_logits[j], &fused, cfg.temperature)?;
                check_finite(l_kt, &format!("kt/{j}"), step)?;
                let (term1, d_aux) = supervised_loss_with_grad(&aux, &target)?;
                check_finite(term1, &format!("term1/{j}"), step)?;
                let (kl, kl_grad) = kl_feature_grad(&t_raw)?;
                check_finite(kl, &format!("kl/{j}"), step)?;

                per_task_sf.push(losses::structural_factorization_loss(l_sup, l_kt, cfg));
                per_task_imb.push(losses::imb_loss(term1, dv, kl, cfg)?);
                log.push(step, format!("sup/{j}"), l_sup);
                log.push(step, format!("kt/{j}"), l_kt);
                log.push(step, format!("term1/{j}"), term1);
                log.push(step, format!("kl/{j}"), kl);

                // dL/d fused = d l_sup + lambda_kt * d l_kt
                let d_fused = &d_fused_sup + &(d_fused_kt * cfg.lambda_kt);
                let sum_zt = &z + &t_used;
                let d_sum = factor.head.backward(&sum_zt, &d_fused);
                // dL/d aux logits carries lambda_I (minimizing -lambda_I * (-term1))
                let d_aux_scaled = d_aux * cfg.lambda_i;
                let d_t_aux = factor.aux_head.backward(&t_used, &d_aux_scaled);

                let mut d_t_used = d_sum.clone();
                d_t_used += &d_t_aux;
                d_z += &d_sum;

                // Additive noise has an identity Jacobian back onto t.
                let mut d_t_raw = d_t_used;
                // Bottleneck KL enters the total with +lambda_I * beta.
                d_t_raw += &(kl_grad * (cfg.lambda_i * cfg.beta));
                tsn_backprops.push((j, d_t_raw));
                traces.push(tsn_trace);
            }

            // Critic/CKN InfoMax gradient: total has -lambda_I * alpha * K * dv.
            let d_scores = dv_grad * (-cfg.lambda_i * cfg.alpha * k_f);
            let d_z_tap = critic.score_backward(&z_teacher, &z_ckn_tap, &d_scores)?;
            ckn.backward(&ckn_trace, &d_z, &[(ckn_tap, d_z_tap)])?;
            for ((j, d_t_raw), tsn_trace) in tsn_backprops.into_iter().zip(&traces) {
                factors[j].tsn.backward(tsn_trace, &d_t_raw, &[])?;
            }

            let total = losses::total_objective(&per_task_sf, &per_task_imb, cfg)?;
            check_finite(total, "total", step)?;
            log.push(step, "dv", dv);
            log.push(step, "total", total);

            let mut students = StudentParams { ckn: &mut ckn, factors: &mut factors, critic: &mut critic };
            students.clip_grad_norm(GRAD_CLIP);
            opt.step(&mut students, lr);
            students.zero_grads();
            drop(ckn);
            step += 1;
        }
    }

    Ok(FactorSet { ckn: ckn_shared, factors, critic, config: cfg.clone(), log })
}

fn rand_distr_standard() -> impl rand::distributions::Distribution<f64> {
    // Box-Muller over two uniforms; rand's StandardNormal lives in rand_distr,
    // which we do not need elsewhere.
    struct StdNormal;
    impl rand::distributions::Distribution<f64> for StdNormal {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }
    }
    StdNormal
}

/// A single-task student (the MTL2STL-KD baseline shape).
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub backbone: Backbone,
    pub head: Dense,
    pub task_id: usize,
}

impl StudentModel {
    pub fn predict(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        let z = self.backbone.forward(x)?;
        self.head.forward(&z)
    }
}

impl Parameterized for StudentModel {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.backbone.visit_params(&crate::nn::join_name(prefix, "backbone"), f);
        self.head.visit_params(&crate::nn::join_name(prefix, "head"), f);
    }

    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f64>)) {
        self.backbone.for_each_param(&crate::nn::join_name(prefix, "backbone"), f);
        self.head.for_each_param(&crate::nn::join_name(prefix, "head"), f);
    }
}

/// Distill one single-task student from the teacher's task logits:
/// CE + lambda_kt * soft-target.
pub fn train_kd_student(
    teacher: &TeacherModel,
    task_id: usize,
    data: &DatasetSplit,
    spec: &BackboneSpec,
    lambda_kt: f64,
    temperature: f64,
    tcfg: &TrainConfig,
) -> Result<StudentModel> {
    tcfg.validate()?;
    if task_id >= teacher.num_tasks() {
        return Err(KfError::NotFound(format!("teacher has no task {task_id}")));
    }
    let classes = teacher.class_counts[task_id];
    let mut rng_init = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(7 + task_id as u64));
    let mut model = StudentModel {
        backbone: Backbone::init_with_rng(spec, &mut rng_init)?,
        head: Dense::init(spec.feature_dim, classes, &mut rng_init),
        task_id,
    };
    let mut opt = tcfg.make_optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let num_tasks = teacher.num_tasks();
    let mut step = 0usize;
    for epoch in 0..tcfg.epochs {
        let lr = tcfg.learning_rate * tcfg.schedule.scale_at(epoch);
        for batch in epoch_batches(data.train.len(), tcfg.batch_size, &mut rng) {
            let (x, labels) = make_batch(&data.train, &batch, num_tasks)?;
            let teacher_logits = teacher.predict(&x)?;
            let trace = model.backbone.forward_trace(&x)?;
            let logits = model.head.forward(trace.feature())?;
            let (l_sup, d_sup) =
                supervised_loss_with_grad(&logits, &TaskTarget::Classes(&labels[task_id]))?;
            let (l_kt, d_kt) =
                soft_target_kd_with_grad(&teacher_logits[task_id], &logits, temperature)?;
            check_finite(l_sup + lambda_kt * l_kt, "total", step)?;
            let d_logits = &d_sup + &(d_kt * lambda_kt);
            let d_feature = model.head.backward(trace.feature(), &d_logits);
            model.backbone.backward(&trace, &d_feature, &[])?;
            model.clip_grad_norm(GRAD_CLIP);
            opt.step(&mut model, lr);
            model.zero_grads();
            step += 1;
        }
    }
    Ok(model)
}

/// Outcome of finetuning a CKN on a downstream task.
#[derive(Debug)]
pub struct FinetuneOutcome {
    pub backbone: Backbone,
    pub head: Dense,
    pub test_accuracy: f64,
    pub log: TrainLog,
}

/// Finetune a CKN (all parameters trainable) with a freshly initialized head
/// on one downstream task. Zero epochs evaluates the untouched CKN with the
/// fresh head.
pub fn finetune_ckn(
    ckn: &Backbone,
    data: &DatasetSplit,
    task_id: usize,
    num_classes: usize,
    tcfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    tcfg.validate()?;
    let mut model = StudentModel {
        backbone: ckn.clone(),
        head: Dense::init(
            ckn.feature_dim(),
            num_classes,
            &mut ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(17)),
        ),
        task_id,
    };
    let mut opt = tcfg.make_optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let num_tasks = data
        .train
        .first()
        .map(|s| s.task_labels.len())
        .ok_or_else(|| KfError::invalid("finetune_ckn: empty training split"))?;
    if task_id >= num_tasks {
        return Err(KfError::NotFound(format!("dataset has no task {task_id}")));
    }
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..tcfg.epochs {
        let lr = tcfg.learning_rate * tcfg.schedule.scale_at(epoch);
        for batch in epoch_batches(data.train.len(), tcfg.batch_size, &mut rng) {
            let (x, labels) = make_batch(&data.train, &batch, num_tasks)?;
            let trace = model.backbone.forward_trace(&x)?;
            let logits = model.head.forward(trace.feature())?;
            let (loss, d_logits) =
                supervised_loss_with_grad(&logits, &TaskTarget::Classes(&labels[task_id]))?;
            check_finite(loss, "sup", step)?;
            log.push(step, "sup", loss);
            let d_feature = model.head.backward(trace.feature(), &d_logits);
            model.backbone.backward(&trace, &d_feature, &[])?;
            model.clip_grad_norm(GRAD_CLIP);
            opt.step(&mut model, lr);
            model.zero_grads();
            step += 1;
        }
    }
    let eval = evaluate_single_task(&model, &data.test, task_id)?;
    Ok(FinetuneOutcome { test_accuracy: eval.accuracy, backbone: model.backbone, head: model.head, log })
}

/// Anything that predicts logits for a set of dataset tasks.
pub trait MultiTaskPredictor {
    /// (dataset task id, logits) pairs for one input batch.
    fn predict_tasks(&self, x: &Array4<f64>) -> Result<Vec<(usize, Array2<f64>)>>;
}

impl MultiTaskPredictor for TeacherModel {
    fn predict_tasks(&self, x: &Array4<f64>) -> Result<Vec<(usize, Array2<f64>)>> {
        Ok(self.predict(x)?.into_iter().enumerate().collect())
    }
}

impl MultiTaskPredictor for FactorSet {
    fn predict_tasks(&self, x: &Array4<f64>) -> Result<Vec<(usize, Array2<f64>)>> {
        self.factors
            .iter()
            .map(|f| Ok((f.task_id, f.forward(x)?.fused_logits)))
            .collect()
    }
}

impl MultiTaskPredictor for StudentModel {
    fn predict_tasks(&self, x: &Array4<f64>) -> Result<Vec<(usize, Array2<f64>)>> {
        Ok(vec![(self.task_id, self.predict(x)?)])
    }
}

/// Evaluation results for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub accuracy: f64,
    /// One-vs-rest macro ROC-AUC over classes present in the test split.
    pub macro_auc: f64,
    /// Per-class AUC; `None` where the class is absent (or has no negatives).
    pub per_class_auc: Vec<Option<f64>>,
}

/// Evaluation results across tasks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
}

impl EvalReport {
    /// Mean of the per-task macro AUCs.
    pub fn mean_macro_auc(&self) -> f64 {
        if self.tasks.is_empty() {
            return f64::NAN;
        }
        self.tasks.iter().map(|t| t.macro_auc).sum::<f64>() / self.tasks.len() as f64
    }

    pub fn mean_accuracy(&self) -> f64 {
        if self.tasks.is_empty() {
            return f64::NAN;
        }
        self.tasks.iter().map(|t| t.accuracy).sum::<f64>() / self.tasks.len() as f64
    }
}

const EVAL_BATCH: usize = 256;

/// Run a predictor over a test split and score accuracy plus macro ROC-AUC
/// per task.
pub fn evaluate(predictor: &dyn MultiTaskPredictor, test: &[LabeledSample]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(KfError::invalid("evaluate: empty test split"));
    }
    let num_tasks = test[0].task_labels.len();
    let idxs: Vec<usize> = (0..test.len()).collect();
    let mut per_task_logits: std::collections::BTreeMap<usize, Vec<Array2<f64>>> =
        std::collections::BTreeMap::new();
    for chunk in idxs.chunks(EVAL_BATCH) {
        let (x, _) = make_batch(test, chunk, num_tasks)?;
        for (task_id, logits) in predictor.predict_tasks(&x)? {
            per_task_logits.entry(task_id).or_default().push(logits);
        }
    }
    let mut tasks = Vec::new();
    for (task_id, chunks) in per_task_logits {
        let logits = concat_rows(&chunks)?;
        let labels: Vec<usize> = test.iter().map(|s| s.task_labels[task_id]).collect();
        tasks.push(score_task(task_id, &logits, &labels)?);
    }
    Ok(EvalReport { tasks })
}

/// Evaluate one single-task model on its own task.
pub fn evaluate_single_task(
    model: &StudentModel,
    test: &[LabeledSample],
    task_id: usize,
) -> Result<TaskEval> {
    if test.is_empty() {
        return Err(KfError::invalid("evaluate: empty test split"));
    }
    let num_tasks = test[0].task_labels.len();
    let idxs: Vec<usize> = (0..test.len()).collect();
    let mut chunks = Vec::new();
    for chunk in idxs.chunks(EVAL_BATCH) {
        let (x, _) = make_batch(test, chunk, num_tasks)?;
        chunks.push(model.predict(&x)?);
    }
    let logits = concat_rows(&chunks)?;
    let labels: Vec<usize> = test.iter().map(|s| s.task_labels[task_id]).collect();
    score_task(task_id, &logits, &labels)
}

fn concat_rows(chunks: &[Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = chunks.iter().map(Array2::view).collect();
    ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| KfError::shape(format!("concat failed: {e}")))
}

fn score_task(task_id: usize, logits: &Array2<f64>, labels: &[usize]) -> Result<TaskEval> {
    let n = logits.nrows();
    if labels.len() != n {
        return Err(KfError::shape("labels/logits length mismatch"));
    }
    let k = logits.ncols();
    let mut correct = 0usize;
    let mut probs = Array2::zeros((n, k));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (c, &e) in exps.iter().enumerate() {
            probs[[i, c]] = e / sum;
        }
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(c, _)| c)
            .expect("non-empty row");
        if argmax == labels[i] {
            correct += 1;
        }
    }
    let mut per_class_auc = Vec::with_capacity(k);
    for c in 0..k {
        let scores: Vec<f64> = probs.column(c).to_vec();
        let positives: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        per_class_auc.push(roc_auc(&scores, &positives));
    }
    let defined: Vec<f64> = per_class_auc.iter().flatten().copied().collect();
    let macro_auc = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(TaskEval { task_id, accuracy: correct as f64 / n as f64, macro_auc, per_class_auc })
}

/// Mann-Whitney ROC-AUC with average ranks for ties. `None` when either
/// class is empty.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = positives
        .iter()
        .zip(&ranks)
        .filter(|(&p, _)| p)
        .map(|(_, &r)| r)
        .sum();
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Some(auc)
}

/// TSN feature matrix of one factor network over a sample list.
pub fn tsn_features(factor: &FactorNetwork, samples: &[LabeledSample]) -> Result<Array2<f64>> {
    backbone_features(&factor.tsn, samples)
}

/// Feature matrix of a backbone over a sample list, (n, d).
pub fn backbone_features(backbone: &Backbone, samples: &[LabeledSample]) -> Result<Array2<f64>> {
    backbone_tap_features(backbone, samples, backbone.final_tap())
}

/// Channel-pooled feature matrix at a given tap point, (n, tap_dim).
pub fn backbone_tap_features(
    backbone: &Backbone,
    samples: &[LabeledSample],
    tap: usize,
) -> Result<Array2<f64>> {
    if samples.is_empty() {
        return Err(KfError::invalid("empty sample list"));
    }
    let num_tasks = samples[0].task_labels.len();
    let idxs: Vec<usize> = (0..samples.len()).collect();
    let mut chunks = Vec::new();
    for chunk in idxs.chunks(EVAL_BATCH) {
        let (x, _) = make_batch(samples, chunk, num_tasks)?;
        let trace = backbone.forward_trace(&x)?;
        chunks.push(backbone.tap_feature(&trace, tap)?);
    }
    concat_rows(&chunks)
}

/// Ground-truth factor index matrix over a sample list, (n, F).
pub fn factor_matrix(samples: &[LabeledSample]) -> Array2<usize> {
    let f = samples.first().map(|s| s.latent_index.len()).unwrap_or(0);
    let mut out = Array2::zeros((samples.len(), f));
    for (i, s) in samples.iter().enumerate() {
        for (j, &v) in s.latent_index.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

/// Recombine logged components per the total objective and report the worst
/// per-step deviation from the logged total.
pub fn loss_decomposition_error(log: &TrainLog, cfg: &FactorizationConfig, num_tasks: usize) -> f64 {
    let totals = log.series("total");
    let dv = log.series("dv");
    let mut worst: f64 = 0.0;
    for (step_idx, &(step, total)) in totals.iter().enumerate() {
        let dv_val = dv.get(step_idx).map(|&(_, v)| v).unwrap_or(f64::NAN);
        let mut sf = Vec::new();
        let mut imb = Vec::new();
        for j in 0..num_tasks {
            let at = |name: &str| -> f64 {
                log.series(&format!("{name}/{j}"))
                    .iter()
                    .find(|&&(s, _)| s == step)
                    .map(|&(_, v)| v)
                    .unwrap_or(f64::NAN)
            };
            sf.push(at("sup") + cfg.lambda_kt * at("kt"));
            imb.push(-at("term1") + cfg.alpha * dv_val - cfg.beta * at("kl"));
        }
        if let Ok(recombined) = losses::total_objective(&sf, &imb, cfg) {
            worst = worst.max((recombined - total).abs());
        }
    }
    worst
}

/// Simple mean of a slice (reporting helper).
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BackboneKind;
    use crate::synthdata::{generate_split, Factor, LatentFactorSpec};

    fn toy_spec() -> LatentFactorSpec {
        LatentFactorSpec::new(
            vec![
                Factor::new("floor_hue", vec![0.0, 0.25, 0.5, 0.75]),
                Factor::new("wall_hue", vec![0.1, 0.4, 0.7]),
                Factor::new("object_hue", vec![0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875]),
            ],
            (16, 16),
            3,
        )
        .unwrap()
    }

    fn mlp_backbone() -> BackboneSpec {
        BackboneSpec {
            kind: BackboneKind::Mlp,
            input_shape: (3, 16, 16),
            channels: vec![32],
            feature_dim: 16,
        }
    }

    fn fast_tcfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-2,
            momentum: 0.9,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            batch_size: 8,
            epochs,
            schedule: LrSchedule::None,
            seed,
        }
    }

    #[test]
    fn teacher_learns_separable_toy_grid() {
        let data = generate_split(&toy_spec(), None, 0, 0.7).unwrap();
        let out = pretrain_teacher(&data, &mlp_backbone(), &[4, 3, 8], &fast_tcfg(5, 0)).unwrap();
        // train accuracy per task
        let report = evaluate(&out.model, &data.train).unwrap();
        for t in &report.tasks {
            assert!(t.accuracy > 0.95, "task {} accuracy {}", t.task_id, t.accuracy);
        }
        // loss decreased over the first epoch
        let totals = out.log.series("total");
        assert!(totals.last().unwrap().1 < totals.first().unwrap().1);
    }

    #[test]
    fn teacher_training_is_seed_deterministic() {
        let data = generate_split(&toy_spec(), None, 0, 0.7).unwrap();
        let a = pretrain_teacher(&data, &mlp_backbone(), &[4, 3, 8], &fast_tcfg(2, 9)).unwrap();
        let b = pretrain_teacher(&data, &mlp_backbone(), &[4, 3, 8], &fast_tcfg(2, 9)).unwrap();
        assert_eq!(
            crate::checkpoint::param_digest(&a.model),
            crate::checkpoint::param_digest(&b.model)
        );
        let c = pretrain_teacher(&data, &mlp_backbone(), &[4, 3, 8], &fast_tcfg(2, 10)).unwrap();
        assert_ne!(
            crate::checkpoint::param_digest(&a.model),
            crate::checkpoint::param_digest(&c.model)
        );
    }

    #[test]
    fn single_task_teacher_degenerates_to_plain_training() {
        let data = generate_split(&toy_spec(), None, 1, 0.7).unwrap();
        let out = pretrain_teacher(&data, &mlp_backbone(), &[4], &fast_tcfg(2, 0)).unwrap();
        assert_eq!(out.model.num_tasks(), 1);
    }

    fn student_specs() -> StudentSpecs {
        StudentSpecs {
            ckn: mlp_backbone(),
            tsn: BackboneSpec {
                kind: BackboneKind::Mlp,
                input_shape: (3, 16, 16),
                channels: vec![16],
                feature_dim: 16,
            },
            critic_hidden: vec![12],
        }
    }

    #[test]
    fn factorize_runs_and_logs_components() {
        let data = generate_split(&toy_spec(), None, 0, 0.7).unwrap();
        let teacher = pretrain_teacher(&data, &mlp_backbone(), &[4, 3, 8], &fast_tcfg(3, 0)).unwrap();
        let teacher_digest = crate::checkpoint::param_digest(&teacher.model);
        let cfg = FactorizationConfig::default();
        let fs = factorize(&teacher.model, &data, &cfg, &fast_tcfg(2, 1), &student_specs()).unwrap();
        // teacher untouched
        assert_eq!(crate::checkpoint::param_digest(&teacher.model), teacher_digest);
        // exactly 4K + 1 component series
        let names = fs.log.component_names();
        assert_eq!(names.len(), 4 * 3 + 1, "got series {names:?}");
        // total recombines from components per the objective
        assert!(loss_decomposition_error(&fs.log, &cfg, 3) < 1e-6);
        // all factor networks share one CKN
        let d0 = crate::checkpoint::param_digest(&*fs.factors[0].ckn.borrow());
        let d1 = crate::checkpoint::param_digest(&*fs.factors[1].ckn.borrow());
        assert_eq!(d0, d1);
    }

    #[test]
    fn factorize_is_seed_deterministic() {
        let data = generate_split(&toy_spec(), None, 0, 0.7).unwrap();
        let teacher = pretrain_teacher(&data, &mlp_backbone(), &[4, 3, 8], &fast_tcfg(2, 0)).unwrap();
        let cfg = FactorizationConfig::default();
        let a = factorize(&teacher.model, &data, &cfg, &fast_tcfg(2, 5), &student_specs()).unwrap();
        let b = factorize(&teacher.model, &data, &cfg, &fast_tcfg(2, 5), &student_specs()).unwrap();
        assert_eq!(
            crate::checkpoint::param_digest(&*a.ckn.borrow()),
            crate::checkpoint::param_digest(&*b.ckn.borrow())
        );
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    }

    #[test]
    fn lambda_zero_reduces_to_supervised_training() {
        // With lambda_kt = lambda_I = 0 the total equals the summed
        // supervised losses at every step.
        let data = generate_split(&toy_spec(), None, 0, 0.7).unwrap();
        let teacher = pretrain_teacher(&data, &mlp_backbone(), &[4, 3, 8], &fast_tcfg(1, 0)).unwrap();
        let mut cfg = FactorizationConfig::default();
        cfg.lambda_kt = 0.0;
        cfg.lambda_i = 0.0;
        let fs = factorize(&teacher.model, &data, &cfg, &fast_tcfg(1, 2), &student_specs()).unwrap();
        let totals = fs.log.series("total");
        let sups: Vec<_> = (0..3).map(|j| fs.log.series(&format!("sup/{j}"))).collect();
        for (i, &(_, t)) in totals.iter().enumerate() {
            let sum: f64 = sups.iter().map(|s| s[i].1).sum();
            approx::assert_abs_diff_eq!(t, sum, epsilon = 1e-12);
        }
    }

    #[test]
    fn finetune_zero_epochs_keeps_ckn_untouched() {
        let data = generate_split(&toy_spec(), None, 0, 0.7).unwrap();
        let ckn = Backbone::init(&mlp_backbone(), 3).unwrap();
        let before = crate::checkpoint::param_digest(&ckn);
        let out = finetune_ckn(&ckn, &data, 0, 4, &fast_tcfg(0, 0)).unwrap();
        assert_eq!(crate::checkpoint::param_digest(&out.backbone), before);
        assert!(out.test_accuracy >= 0.0);
    }

    #[test]
    fn finetune_beats_or_matches_random_init_on_source_distribution() {
        let data = generate_split(&toy_spec(), None, 0, 0.7).unwrap();
        // "Pretrained" CKN: backbone of a teacher trained on the same data.
        let teacher = pretrain_teacher(&data, &mlp_backbone(), &[4, 3, 8], &fast_tcfg(4, 0)).unwrap();
        // Scarce downstream split of the same distribution, hardest task;
        // paired seeds, mean comparison.
        let downstream = generate_split(&toy_spec(), None, 1, 0.15).unwrap();
        let mut tuned_accs = Vec::new();
        let mut scratch_accs = Vec::new();
        for seed in [11u64, 12, 13] {
            let tuned =
                finetune_ckn(&teacher.model.backbone, &downstream, 2, 8, &fast_tcfg(5, seed))
                    .unwrap();
            let fresh = Backbone::init(&mlp_backbone(), 999).unwrap();
            let scratch = finetune_ckn(&fresh, &downstream, 2, 8, &fast_tcfg(5, seed)).unwrap();
            tuned_accs.push(tuned.test_accuracy);
            scratch_accs.push(scratch.test_accuracy);
        }
        assert!(
            mean(&tuned_accs) >= mean(&scratch_accs),
            "tuned {tuned_accs:?} vs scratch {scratch_accs:?}"
        );
    }

    #[test]
    fn auc_matches_rank_formula_on_hand_table() {
        // scores 0.1, 0.4, 0.35, 0.8 with labels -, -, +, +
        // ranks: 1, 3, 2, 4 -> rank sum of positives = 6
        // AUC = (6 - 2*3/2) / (2*2) = 0.75
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        approx::assert_abs_diff_eq!(auc, 0.75, epsilon = 1e-12);
        // constant scores -> 0.5 by average ranks
        let auc = roc_auc(&[0.5, 0.5, 0.5, 0.5], &[false, true, false, true]).unwrap();
        approx::assert_abs_diff_eq!(auc, 0.5, epsilon = 1e-12);
        // degenerate class -> undefined
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_none());
    }

    #[test]
    fn perfect_and_constant_predictors_score_as_expected() {
        let data = generate_split(&toy_spec(), None, 0, 0.7).unwrap();
        // Perfect predictor: logits one-hot on the true label.
        struct Oracle;
        impl MultiTaskPredictor for Oracle {
            fn predict_tasks(&self, x: &Array4<f64>) -> Result<Vec<(usize, Array2<f64>)>> {
                // Recover the floor hue class from the bottom-band pixel color.
                let n = x.dim().0;
                let classes = toy_spec().factors[0].cardinality();
                let mut logits = Array2::zeros((n, classes));
                for i in 0..n {
                    let r = x[[i, 0, 15, 0]];
                    let g = x[[i, 1, 15, 0]];
                    let b = x[[i, 2, 15, 0]];
                    let (best, _) = (0..classes)
                        .map(|c| {
                            let expect =
                                super::super::synthdata::render_image(&toy_spec(), &[c, 0, 0]);
                            let d = (expect[[0, 15, 0]] - r).abs()
                                + (expect[[1, 15, 0]] - g).abs()
                                + (expect[[2, 15, 0]] - b).abs();
                            (c, d)
                        })
                        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                        .unwrap();
                    logits[[i, best]] = 50.0;
                }
                Ok(vec![(0, logits)])
            }
        }
        let report = evaluate(&Oracle, &data.test).unwrap();
        assert!((report.tasks[0].accuracy - 1.0).abs() < 1e-12);
        assert!((report.tasks[0].macro_auc - 1.0).abs() < 1e-12);

        struct Constant;
        impl MultiTaskPredictor for Constant {
            fn predict_tasks(&self, x: &Array4<f64>) -> Result<Vec<(usize, Array2<f64>)>> {
                Ok(vec![(0, Array2::zeros((x.dim().0, 4)))])
            }
        }
        let report = evaluate(&Constant, &data.test).unwrap();
        approx::assert_abs_diff_eq!(report.tasks[0].macro_auc, 0.5, epsilon = 1e-12);
    }
}
