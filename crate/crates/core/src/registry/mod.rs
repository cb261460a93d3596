//! Per-epoch checkpoints and self-teacher selection.
//!
//! Every epoch's parameters are stored together with their validation score
//! under a [`GKind`]. The teacher for epoch `t` is the stored checkpoint with
//! epoch `< t` and the best score (highest for accuracy and mini-BLEU, lowest
//! for NLL), ties going to the later epoch.
//!
//! A registry bound to a directory writes one binary file per checkpoint (see
//! [`checkpoint`]) plus a text index `index.csv`:
//!
//! ```text
//! # als checkpoint index v1
//! # g_kind=accuracy
//! # params=layer0.weight:128x20;layer0.bias:128;...
//! epoch,file,g_kind,val_score
//! 1,epoch-0001.ckpt,accuracy,0.41
//! ```

pub mod checkpoint;
pub mod g;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub use checkpoint::{Checkpoint, GKind};
pub use g::{evaluate_g, mini_bleu, SequencePrediction};

use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.csv";
const INDEX_BANNER: &str = "# als checkpoint index v1";
const INDEX_HEADER: &str = "epoch,file,g_kind,val_score";

/// Named parameter tensors in storage order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamManifest {
    pub tensors: Vec<(String, Vec<usize>)>,
}

impl ParamManifest {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn encode(&self) -> String {
        self.tensors
            .iter()
            .map(|(name, shape)| {
                let dims: Vec<String> = shape.iter().map(ToString::to_string).collect();
                format!("{name}:{}", dims.join("x"))
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    fn decode(text: &str) -> Option<Self> {
        let mut tensors = Vec::new();
        for item in text.split(';').filter(|s| !s.is_empty()) {
            let (name, dims) = item.split_once(':')?;
            let shape = dims.split('x').map(|d| d.parse().ok()).collect::<Option<Vec<usize>>>()?;
            tensors.push((name.to_string(), shape));
        }
        Some(Self { tensors })
    }
}

/// How many checkpoints to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Retention {
    #[default]
    KeepAll,
    /// At most `max` checkpoints; eviction removes the oldest checkpoint that
    /// is neither the best scoring nor the most recent. `max` is at least 2.
    Capped { max: usize },
}

/// Identifier of a stored checkpoint (its epoch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CheckpointId(pub u32);

/// Model that can produce logits from a flat parameter slice without touching
/// any gradient state.
pub trait Forward {
    type Input: ?Sized;

    /// One logit vector per output position.
    fn forward(&self, params: &[f32], input: &Self::Input) -> Vec<Vec<f32>>;
}

/// Read-only view of the selected self-teacher. Cheap to clone and safe to
/// share across threads.
#[derive(Debug, Clone)]
pub struct TeacherHandle {
    checkpoint: Arc<Checkpoint>,
}

impl TeacherHandle {
    pub fn epoch(&self) -> u32 {
        self.checkpoint.epoch
    }

    pub fn val_score(&self) -> f64 {
        self.checkpoint.val_score
    }

    pub fn params(&self) -> &[f32] {
        &self.checkpoint.params
    }

    pub fn forward<M: Forward>(&self, model: &M, input: &M::Input) -> Vec<Vec<f32>> {
        model.forward(&self.checkpoint.params, input)
    }
}

/// Checkpoint store. Mutation needs `&mut self`, selection `&self`; wrap in a
/// lock to share between threads.
#[derive(Debug)]
pub struct TeacherRegistry {
    manifest: ParamManifest,
    g_kind: GKind,
    dir: Option<PathBuf>,
    retention: Retention,
    checkpoints: BTreeMap<u32, Arc<Checkpoint>>,
}

pub fn checkpoint_file_name(epoch: u32) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

impl TeacherRegistry {
    pub fn in_memory(manifest: ParamManifest, g_kind: GKind) -> Self {
        Self {
            manifest,
            g_kind,
            dir: None,
            retention: Retention::KeepAll,
            checkpoints: BTreeMap::new(),
        }
    }

    /// Registry persisted under `dir`, which is created if missing. An
    /// existing index there is overwritten on the first store.
    pub fn in_dir(dir: impl Into<PathBuf>, manifest: ParamManifest, g_kind: GKind) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut reg = Self::in_memory(manifest, g_kind);
        reg.dir = Some(dir);
        reg.write_index()?;
        Ok(reg)
    }

    /// Loads a registry previously written with [`TeacherRegistry::in_dir`].
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let bad = |reason: String| Error::Format {
            path: index_path.clone(),
            reason,
        };
        let mut g_kind = None;
        let mut manifest = None;
        let mut entries = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(v) = line.strip_prefix("# g_kind=") {
                g_kind = Some(GKind::from_name(v).ok_or_else(|| bad(format!("unknown g kind {v:?}")))?);
            } else if let Some(v) = line.strip_prefix("# params=") {
                manifest = Some(ParamManifest::decode(v).ok_or_else(|| bad(format!("bad manifest {v:?}")))?);
            } else if line.starts_with('#') || line == INDEX_HEADER {
                continue;
            } else {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 4 {
                    return Err(bad(format!("bad index row {line:?}")));
                }
                entries.push(cols[1].to_string());
            }
        }
        let g_kind = g_kind.ok_or_else(|| bad("missing g_kind line".into()))?;
        let mut reg = Self::in_memory(manifest.unwrap_or_default(), g_kind);
        for file in entries {
            let ck = Checkpoint::load(&dir.join(&file))?;
            reg.checkpoints.insert(ck.epoch, Arc::new(ck));
        }
        reg.dir = Some(dir);
        Ok(reg)
    }

    pub fn with_retention(mut self, retention: Retention) -> Result<Self> {
        if let Retention::Capped { max } = retention {
            if max < 2 {
                return Err(Error::invalid("retention cap must keep at least 2 checkpoints"));
            }
        }
        self.retention = retention;
        Ok(self)
    }

    pub fn g_kind(&self) -> GKind {
        self.g_kind
    }

    pub fn manifest(&self) -> &ParamManifest {
        &self.manifest
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    /// Stored checkpoints in epoch order.
    pub fn checkpoints(&self) -> impl Iterator<Item = &Checkpoint> {
        self.checkpoints.values().map(AsRef::as_ref)
    }

    pub fn get(&self, epoch: u32) -> Option<&Checkpoint> {
        self.checkpoints.get(&epoch).map(AsRef::as_ref)
    }

    pub fn index_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(INDEX_FILE))
    }

    /// Files currently backing the registry, index first.
    pub fn files(&self) -> Vec<PathBuf> {
        let Some(dir) = &self.dir else {
            return Vec::new();
        };
        std::iter::once(dir.join(INDEX_FILE))
            .chain(self.checkpoints.keys().map(|&e| dir.join(checkpoint_file_name(e))))
            .collect()
    }

    pub fn store(&mut self, params: Vec<f32>, epoch: u32, val_score: f64, g_kind: GKind) -> Result<CheckpointId> {
        if self.checkpoints.contains_key(&epoch) {
            return Err(Error::DuplicateEpoch { epoch });
        }
        if g_kind != self.g_kind {
            return Err(Error::invalid(format!(
                "registry ranks by {}, got a {} score",
                self.g_kind.name(),
                g_kind.name()
            )));
        }
        if !val_score.is_finite() {
            return Err(Error::invalid(format!("validation score {val_score} is not finite")));
        }
        let expected = self.manifest.param_count();
        if !self.manifest.tensors.is_empty() && params.len() != expected {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, model declares {expected}",
                params.len()
            )));
        }
        let ck = Checkpoint {
            epoch,
            params,
            val_score,
            g_kind,
        };
        if let Some(dir) = &self.dir {
            ck.save(&dir.join(checkpoint_file_name(epoch)))?;
        }
        self.checkpoints.insert(epoch, Arc::new(ck));
        self.evict()?;
        self.write_index()?;
        Ok(CheckpointId(epoch))
    }

    fn better(&self, a: &Checkpoint, b: &Checkpoint) -> bool {
        // strict improvement, or a tie broken toward the later epoch
        let (sa, sb) = (a.val_score, b.val_score);
        let strictly = if self.g_kind.higher_is_better() { sa > sb } else { sa < sb };
        strictly || (sa == sb && a.epoch > b.epoch)
    }

    fn best_before(&self, t: u32) -> Option<&Arc<Checkpoint>> {
        self.checkpoints
            .range(..t)
            .map(|(_, c)| c)
            .reduce(|best, c| if self.better(c, best) { c } else { best })
    }

    /// Best checkpoint among epochs strictly before `t`.
    pub fn select_teacher(&self, t: u32) -> Result<TeacherHandle> {
        self.best_before(t)
            .map(|c| TeacherHandle {
                checkpoint: Arc::clone(c),
            })
            .ok_or(Error::NoTeacher { epoch: t })
    }

    fn evict(&mut self) -> Result<()> {
        let Retention::Capped { max } = self.retention else {
            return Ok(());
        };
        while self.checkpoints.len() > max {
            let best = self.best_before(u32::MAX).map(|c| c.epoch);
            let last = self.checkpoints.keys().next_back().copied();
            let victim = self
                .checkpoints
                .keys()
                .copied()
                .find(|&e| Some(e) != best && Some(e) != last)
                .expect("cap of at least 2 leaves an evictable checkpoint");
            self.checkpoints.remove(&victim);
            if let Some(dir) = &self.dir {
                let path = dir.join(checkpoint_file_name(victim));
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    fn write_index(&self) -> Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let mut text = String::new();
        let _ = writeln!(text, "{INDEX_BANNER}");
        let _ = writeln!(text, "# g_kind={}", self.g_kind.name());
        let _ = writeln!(text, "# params={}", self.manifest.encode());
        let _ = writeln!(text, "{INDEX_HEADER}");
        for c in self.checkpoints.values() {
            let _ = writeln!(
                text,
                "{},{},{},{}",
                c.epoch,
                checkpoint_file_name(c.epoch),
                c.g_kind.name(),
                c.val_score
            );
        }
        checkpoint::write_atomic(&dir.join(INDEX_FILE), text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> ParamManifest {
        ParamManifest {
            tensors: vec![("w".into(), vec![2, 2]), ("b".into(), vec![2])],
        }
    }

    fn registry(g: GKind) -> TeacherRegistry {
        TeacherRegistry::in_memory(manifest(), g)
    }

    fn params(seed: f32) -> Vec<f32> {
        (0..6).map(|i| seed + i as f32 * 0.25).collect()
    }

    #[test]
    fn store_counts_and_rejects_duplicates() {
        let mut r = registry(GKind::Accuracy);
        r.store(params(0.0), 1, 0.5, GKind::Accuracy).unwrap();
        assert_eq!(r.len(), 1);
        assert!(matches!(
            r.store(params(1.0), 1, 0.6, GKind::Accuracy),
            Err(Error::DuplicateEpoch { epoch: 1 })
        ));
        for e in [3, 2, 5, 4] {
            r.store(params(e as f32), e, 0.1, GKind::Accuracy).unwrap();
        }
        let epochs: Vec<u32> = r.checkpoints().map(|c| c.epoch).collect();
        assert_eq!(epochs, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn store_validates_inputs() {
        let mut r = registry(GKind::Accuracy);
        assert!(r.store(vec![0.0; 5], 1, 0.5, GKind::Accuracy).is_err());
        assert!(r.store(params(0.0), 1, f64::NAN, GKind::Accuracy).is_err());
        assert!(r.store(params(0.0), 1, 0.5, GKind::Nll).is_err());
        assert!(r.is_empty());
    }

    #[test]
    fn argmax_selection() {
        let mut r = registry(GKind::Accuracy);
        for (e, s) in [(1, 0.5), (2, 0.7), (3, 0.6)] {
            r.store(params(0.0), e, s, GKind::Accuracy).unwrap();
        }
        assert_eq!(r.select_teacher(4).unwrap().epoch(), 2);
    }

    #[test]
    fn ties_go_to_the_latest_epoch() {
        let mut r = registry(GKind::MiniBleu);
        for (e, s) in [(1, 0.5), (2, 0.7), (3, 0.7)] {
            r.store(params(0.0), e, s, GKind::MiniBleu).unwrap();
        }
        assert_eq!(r.select_teacher(4).unwrap().epoch(), 3);
    }

    #[test]
    fn nll_uses_argmin() {
        let mut r = registry(GKind::Nll);
        for (e, s) in [(1, 2.1), (2, 1.8), (3, 1.9)] {
            r.store(params(0.0), e, s, GKind::Nll).unwrap();
        }
        assert_eq!(r.select_teacher(4).unwrap().epoch(), 2);
    }

    #[test]
    fn never_selects_current_or_future_epochs() {
        let mut r = registry(GKind::Accuracy);
        for (e, s) in [(1, 0.2), (2, 0.4), (3, 0.9)] {
            r.store(params(0.0), e, s, GKind::Accuracy).unwrap();
        }
        assert_eq!(r.select_teacher(3).unwrap().epoch(), 2);
        assert_eq!(r.select_teacher(2).unwrap().epoch(), 1);
        assert!(matches!(r.select_teacher(1), Err(Error::NoTeacher { epoch: 1 })));
    }

    #[test]
    fn empty_registry_has_no_teacher() {
        assert!(matches!(
            registry(GKind::Accuracy).select_teacher(5),
            Err(Error::NoTeacher { .. })
        ));
    }

    #[test]
    fn capped_retention_keeps_best_and_last() {
        let mut r = registry(GKind::Accuracy)
            .with_retention(Retention::Capped { max: 3 })
            .unwrap();
        for (e, s) in [(1, 0.9), (2, 0.1), (3, 0.2), (4, 0.3), (5, 0.4)] {
            r.store(params(0.0), e, s, GKind::Accuracy).unwrap();
        }
        let epochs: Vec<u32> = r.checkpoints().map(|c| c.epoch).collect();
        assert_eq!(epochs, vec![1, 4, 5]);
        assert!(registry(GKind::Accuracy)
            .with_retention(Retention::Capped { max: 1 })
            .is_err());
    }

    #[test]
    fn persisted_registry_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg");
        let mut r = TeacherRegistry::in_dir(&path, manifest(), GKind::Nll).unwrap();
        let p = vec![0.1f32, -2.5, 3.0e-8, f32::MAX, -0.0, 7.0];
        r.store(p.clone(), 1, 1.25, GKind::Nll).unwrap();
        r.store(params(2.0), 2, 0.75, GKind::Nll).unwrap();
        assert_eq!(r.files().len(), 3);
        assert!(r.files().iter().all(|f| f.exists()));

        let back = TeacherRegistry::open(&path).unwrap();
        assert_eq!(back.g_kind(), GKind::Nll);
        assert_eq!(back.manifest(), &manifest());
        let bits: Vec<u32> = back.get(1).unwrap().params.iter().map(|x| x.to_bits()).collect();
        let expect: Vec<u32> = p.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, expect);
        assert_eq!(back.select_teacher(3).unwrap().epoch(), 2);

        let index = fs::read_to_string(path.join(INDEX_FILE)).unwrap();
        assert!(index.contains("1,epoch-0001.ckpt,nll,1.25"));
    }

    #[test]
    fn eviction_removes_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = TeacherRegistry::in_dir(dir.path(), manifest(), GKind::Accuracy)
            .unwrap()
            .with_retention(Retention::Capped { max: 2 })
            .unwrap();
        for e in 1..=4 {
            r.store(params(0.0), e, f64::from(e), GKind::Accuracy).unwrap();
        }
        assert!(!dir.path().join(checkpoint_file_name(1)).exists());
        assert!(dir.path().join(checkpoint_file_name(4)).exists());
        assert_eq!(r.files().len(), 3);
    }

    #[test]
    fn handles_are_shareable() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<TeacherHandle>();
    }
}
