//! The model hub: registers factor networks and assembles combined-task
//! models from one CKN plus any subset of TSNs, without touching any
//! parameter.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{param_digest, Checkpoint};
use crate::error::{KfError, Result};
use crate::models::{forward_head, Backbone, BackboneSpec, FactorNetwork};
use crate::nn::layers::Dense;
use crate::nn::{join_name, ParamVisitor, Parameterized};
use crate::trainer::{FactorSet, MultiTaskPredictor};

/// Task-owned modules of one registered factor network.
#[derive(Debug, Clone)]
pub struct HubEntry {
    pub tsn: Backbone,
    pub head: Dense,
    pub aux_head: Dense,
    /// Digest over the task-owned parameters.
    pub digest: String,
}

impl Parameterized for HubEntry {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.tsn.visit_params(&join_name(prefix, "tsn"), f);
        self.head.visit_params(&join_name(prefix, "head"), f);
        self.aux_head.visit_params(&join_name(prefix, "aux_head"), f);
    }

    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f64>)) {
        self.tsn.for_each_param(&join_name(prefix, "tsn"), f);
        self.head.for_each_param(&join_name(prefix, "head"), f);
        self.aux_head.for_each_param(&join_name(prefix, "aux_head"), f);
    }
}

/// Provenance carried by a hub: where its parameters came from.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HubProvenance {
    pub teacher_digest: Option<String>,
    pub config_digest: Option<String>,
}

/// A pool of factor networks sharing one CKN.
#[derive(Debug, Clone)]
pub struct FactorHub {
    ckn: Backbone,
    ckn_digest: String,
    entries: BTreeMap<usize, HubEntry>,
    pub provenance: HubProvenance,
}

impl FactorHub {
    pub fn new(ckn: Backbone, provenance: HubProvenance) -> Self {
        let ckn_digest = param_digest(&ckn);
        Self { ckn, ckn_digest, entries: BTreeMap::new(), provenance }
    }

    /// Build a hub holding every factor network of a factorization run.
    pub fn from_factor_set(set: &FactorSet, provenance: HubProvenance) -> Result<Self> {
        let ckn = set.ckn.borrow().clone();
        let mut hub = Self::new(ckn, provenance);
        for factor in &set.factors {
            hub.register(factor)?;
        }
        Ok(hub)
    }

    pub fn ckn_digest(&self) -> &str {
        &self.ckn_digest
    }

    pub fn ckn(&self) -> &Backbone {
        &self.ckn
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn entry(&self, task_id: usize) -> Option<&HubEntry> {
        self.entries.get(&task_id)
    }

    /// Register one factor network. Its shared-CKN digest must match the
    /// hub's CKN. Returns true when an existing entry for the same task was
    /// replaced.
    pub fn register(&mut self, factor: &FactorNetwork) -> Result<bool> {
        let factor_ckn_digest = param_digest(&*factor.ckn.borrow());
        if factor_ckn_digest != self.ckn_digest {
            return Err(KfError::IncompatibleFactor(format!(
                "task {} was trained against CKN {} but the hub holds {}",
                factor.task_id,
                &factor_ckn_digest[..12.min(factor_ckn_digest.len())],
                &self.ckn_digest[..12.min(self.ckn_digest.len())],
            )));
        }
        let entry = HubEntry {
            tsn: factor.tsn.clone(),
            head: factor.head.clone(),
            aux_head: factor.aux_head.clone(),
            digest: String::new(),
        };
        let entry = HubEntry { digest: param_digest(&entry), ..entry };
        Ok(self.entries.insert(factor.task_id, entry).is_some())
    }

    /// Assemble a composite model over a subset of tasks. No parameter is
    /// copied from anywhere but the hub; nothing is retrained.
    pub fn assemble(&self, task_ids: &[usize]) -> Result<CompositeModel> {
        if task_ids.is_empty() {
            return Err(KfError::invalid("assemble needs at least one task"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &id in task_ids {
            if !seen.insert(id) {
                return Err(KfError::invalid(format!("duplicate task id {id}")));
            }
        }
        let mut parts = Vec::with_capacity(task_ids.len());
        for &id in task_ids {
            let entry = self
                .entries
                .get(&id)
                .ok_or_else(|| KfError::NotFound(format!("task {id} is not in the hub")))?;
            parts.push(CompositePart {
                task_id: id,
                tsn: entry.tsn.clone(),
                head: entry.head.clone(),
            });
        }
        Ok(CompositeModel { ckn: self.ckn.clone(), parts, ckn_forwards: Cell::new(0) })
    }
}

#[derive(Debug, Clone)]
pub struct CompositePart {
    pub task_id: usize,
    pub tsn: Backbone,
    pub head: Dense,
}

/// A CKN plus an ordered selection of (TSN, head) pairs.
#[derive(Debug)]
pub struct CompositeModel {
    pub ckn: Backbone,
    pub parts: Vec<CompositePart>,
    ckn_forwards: Cell<usize>,
}

/// How composite predictions are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    PerTask,
    MergedArgmax,
}

/// Merged prediction: argmax over the concatenation of all selected heads'
/// class scores.
#[derive(Debug, Clone)]
pub struct MergedPrediction {
    /// Per-sample argmax index into the concatenated score vector.
    pub global: Vec<usize>,
    /// (task_id, class count) per selected head, in concatenation order.
    pub blocks: Vec<(usize, usize)>,
}

impl MergedPrediction {
    /// Map a global class index back to (task_id, class within task).
    pub fn resolve(&self, global: usize) -> (usize, usize) {
        let mut offset = 0;
        for &(task_id, classes) in &self.blocks {
            if global < offset + classes {
                return (task_id, global - offset);
            }
            offset += classes;
        }
        panic!("global index {global} out of range");
    }
}

#[derive(Debug, Clone)]
pub enum CompositePrediction {
    PerTask(Vec<(usize, Array2<f64>)>),
    Merged(MergedPrediction),
}

impl CompositeModel {
    /// How many times the CKN forward has run on this composite.
    pub fn ckn_forward_count(&self) -> usize {
        self.ckn_forwards.get()
    }

    /// Run the composite: CKN once per batch, each selected TSN + head once.
    pub fn predict(&self, x: &Array4<f64>, mode: PredictMode) -> Result<CompositePrediction> {
        if self.parts.is_empty() {
            return Err(KfError::invalid("empty composite"));
        }
        let z = self.ckn.forward(x)?;
        self.ckn_forwards.set(self.ckn_forwards.get() + 1);
        let mut per_task = Vec::with_capacity(self.parts.len());
        for part in &self.parts {
            let t = part.tsn.forward(x)?;
            let logits = forward_head(&part.head, &z, &t)?;
            per_task.push((part.task_id, logits));
        }
        match mode {
            PredictMode::PerTask => Ok(CompositePrediction::PerTask(per_task)),
            PredictMode::MergedArgmax => {
                let n = x.dim().0;
                let blocks: Vec<(usize, usize)> =
                    per_task.iter().map(|(id, l)| (*id, l.ncols())).collect();
                let mut global = Vec::with_capacity(n);
                for i in 0..n {
                    let mut best = (0usize, f64::NEG_INFINITY);
                    let mut offset = 0;
                    for (_, logits) in &per_task {
                        for c in 0..logits.ncols() {
                            let v = logits[[i, c]];
                            if v > best.1 {
                                best = (offset + c, v);
                            }
                        }
                        offset += logits.ncols();
                    }
                    global.push(best.0);
                }
                Ok(CompositePrediction::Merged(MergedPrediction { global, blocks }))
            }
        }
    }

    /// Total parameter count: |CKN| + sum of selected |TSN| + |head|.
    pub fn parameter_count(&self) -> usize {
        let mut count = self.ckn.param_count();
        for part in &self.parts {
            count += part.tsn.param_count() + param_count_dense(&part.head);
        }
        count
    }
}

fn param_count_dense(d: &Dense) -> usize {
    d.w.len() + d.b.len()
}

impl MultiTaskPredictor for CompositeModel {
    fn predict_tasks(&self, x: &Array4<f64>) -> Result<Vec<(usize, Array2<f64>)>> {
        match self.predict(x, PredictMode::PerTask)? {
            CompositePrediction::PerTask(v) => Ok(v),
            CompositePrediction::Merged(_) => unreachable!(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HubManifest {
    ckn_digest: String,
    ckn_spec: BackboneSpec,
    tasks: Vec<HubTaskMeta>,
    provenance: HubProvenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct HubTaskMeta {
    task_id: usize,
    digest: String,
    classes: usize,
    tsn_spec: BackboneSpec,
}

/// Persist a hub as a directory: one CKN checkpoint, one checkpoint per
/// task, and a manifest listing digests and task metadata.
pub fn save_hub(hub: &FactorHub, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ckn_ckpt = Checkpoint::from_params(hub.ckn(), serde_json::json!({"role": "ckn"}));
    ckn_ckpt.write(&dir.join("ckn.ckpt"))?;
    let mut tasks = Vec::new();
    for (&task_id, entry) in &hub.entries {
        let meta = serde_json::json!({
            "role": "factor",
            "task_id": task_id,
            "ckn_digest": hub.ckn_digest,
        });
        Checkpoint::from_params(entry, meta).write(&dir.join(format!("task_{task_id}.ckpt")))?;
        tasks.push(HubTaskMeta {
            task_id,
            digest: entry.digest.clone(),
            classes: entry.head.out_dim(),
            tsn_spec: entry.tsn.spec.clone(),
        });
    }
    let manifest = HubManifest {
        ckn_digest: hub.ckn_digest.clone(),
        ckn_spec: hub.ckn.spec.clone(),
        tasks,
        provenance: hub.provenance.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Load a hub directory written by [`save_hub`].
pub fn load_hub(dir: &Path) -> Result<FactorHub> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(KfError::NotFound(format!("{} has no manifest.json", dir.display())));
    }
    let manifest: HubManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    let ckn_ckpt = Checkpoint::read(&dir.join("ckn.ckpt"))?;
    let mut ckn = Backbone::init(&manifest.ckn_spec, 0)?;
    ckn_ckpt.load_into(&mut ckn)?;
    let ckn_digest = param_digest(&ckn);
    if ckn_digest != manifest.ckn_digest {
        return Err(KfError::Format("ckn.ckpt does not match the manifest digest".into()));
    }
    let mut entries = BTreeMap::new();
    for task in &manifest.tasks {
        let ckpt = Checkpoint::read(&dir.join(format!("task_{}.ckpt", task.task_id)))?;
        let d = manifest.ckn_spec.feature_dim;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut entry = HubEntry {
            tsn: Backbone::init(&task.tsn_spec, 0)?,
            head: Dense::init(d, task.classes, &mut rng),
            aux_head: Dense::init(d, task.classes, &mut rng),
            digest: task.digest.clone(),
        };
        ckpt.load_into(&mut entry)?;
        if param_digest(&entry) != task.digest {
            return Err(KfError::Format(format!(
                "task_{}.ckpt does not match the manifest digest",
                task.task_id
            )));
        }
        entries.insert(task.task_id, entry);
    }
    Ok(FactorHub { ckn, ckn_digest, entries, provenance: manifest.provenance })
}

use rand::SeedableRng;
