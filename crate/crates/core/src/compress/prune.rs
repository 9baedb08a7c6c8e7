//! Global unstructured magnitude pruning.

use super::CompressError;
use crate::model::Model;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneScope {
    /// conv and projection weights of the synthesis net
    #[default]
    SynthesisOnly,
    /// every tensor, grids and biases included
    All,
}

impl PruneScope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "synthesis_only" => Some(PruneScope::SynthesisOnly),
            "all" => Some(PruneScope::All),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PruneScope::SynthesisOnly => "synthesis_only",
            PruneScope::All => "all",
        }
    }

    pub fn includes(self, tensor_name: &str) -> bool {
        match self {
            PruneScope::All => true,
            PruneScope::SynthesisOnly => !tensor_name.starts_with("grid.") && tensor_name.ends_with(".weight"),
        }
    }
}

/// Keep-masks per model tensor; `None` marks tensors outside the scope.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub scope: PruneScope,
    pub target_sparsity: f64,
    keep: Vec<Option<Vec<bool>>>,
}

impl PruneMask {
    /// Mask that keeps everything.
    pub fn keep_all<S: Real>(model: &Model<S>) -> Self {
        PruneMask {
            scope: PruneScope::SynthesisOnly,
            target_sparsity: 0.0,
            keep: vec![None; model.tensor_count()],
        }
    }

    pub fn keep(&self, tensor: usize) -> Option<&[bool]> {
        self.keep.get(tensor).and_then(|k| k.as_deref())
    }

    pub fn tensor_count(&self) -> usize {
        self.keep.len()
    }

    /// Achieved fraction of pruned weights among in-scope weights.
    pub fn sparsity(&self) -> f64 {
        let (mut n, mut pruned) = (0usize, 0usize);
        for k in self.keep.iter().flatten() {
            n += k.len();
            pruned += k.iter().filter(|&&x| !x).count();
        }
        if n == 0 {
            0.0
        } else {
            pruned as f64 / n as f64
        }
    }

    /// Zeroes every pruned position.
    pub fn apply<S: Real>(&self, model: &mut Model<S>) {
        for (t, keep) in model.tensors_mut().into_iter().zip(&self.keep) {
            if let Some(keep) = keep {
                for (x, &k) in t.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *x = S::zero();
                    }
                }
            }
        }
    }
}

/// Keep-masks for `groups` treated as one flat vector: the
/// `round(sparsity · n)` smallest magnitudes are pruned, and among equal
/// magnitudes later flat indices go first.
pub fn prune_values(groups: &[&[f64]], sparsity: f64) -> Result<Vec<Vec<bool>>, CompressError> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(CompressError::Invalid {
            field: "sparsity",
            detail: format!("{sparsity} not in [0, 1)"),
        });
    }
    let mut flat: Vec<(f64, usize)> = Vec::new();
    for g in groups {
        for &x in g.iter() {
            flat.push((x.abs(), flat.len()));
        }
    }
    let n_prune = (sparsity * flat.len() as f64).round() as usize;
    flat.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut keep_flat = vec![true; flat.len()];
    for &(_, i) in &flat[..n_prune] {
        keep_flat[i] = false;
    }
    let mut out = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for g in groups {
        out.push(keep_flat[offset..offset + g.len()].to_vec());
        offset += g.len();
    }
    Ok(out)
}

pub fn prune_global<S: Real>(model: &Model<S>, sparsity: f64, scope: PruneScope) -> Result<PruneMask, CompressError> {
    let named = model.named_tensors();
    let in_scope: Vec<bool> = named.iter().map(|(n, _)| scope.includes(n)).collect();
    let values: Vec<Vec<f64>> = named
        .iter()
        .zip(&in_scope)
        .filter(|(_, &s)| s)
        .map(|((_, t), _)| t.data().iter().map(|v| v.as_f64()).collect())
        .collect();
    let refs: Vec<&[f64]> = values.iter().map(|v| v.as_slice()).collect();
    let mut masks = prune_values(&refs, sparsity)?.into_iter();
    let keep = in_scope
        .iter()
        .map(|&s| if s { masks.next() } else { None })
        .collect();
    Ok(PruneMask {
        scope,
        target_sparsity: sparsity,
        keep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_quantile() {
        let w = [1.0, -2.0, 3.0, -4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let k = prune_values(&[&w], 0.4).unwrap();
        assert_eq!(
            k[0],
            vec![false, false, false, false, true, true, true, true, true, true]
        );
    }

    #[test]
    fn zero_sparsity_keeps_all_and_one_is_rejected() {
        let w = [0.0, 1.0, -1.0];
        assert!(prune_values(&[&w], 0.0).unwrap()[0].iter().all(|&k| k));
        assert!(prune_values(&[&w], 1.0).is_err());
    }

    #[test]
    fn ties_keep_earlier_indices() {
        let a = [0.5, 0.5];
        let b = [0.5, 0.5];
        let k = prune_values(&[&a, &b], 0.5).unwrap();
        assert_eq!(k, vec![vec![true, true], vec![false, false]]);
    }

    #[test]
    fn random_weights_hit_target() {
        let mut s = 7u64;
        let w: Vec<f64> = (0..10_000)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let k = prune_values(&[&w[..3000], &w[3000..]], 0.4).unwrap();
        let pruned = k.iter().flatten().filter(|&&x| !x).count() as f64 / 10_000.0;
        assert!((0.395..=0.405).contains(&pruned));
    }

    #[test]
    fn scope_names() {
        let s = PruneScope::SynthesisOnly;
        assert!(s.includes("block0.weight") && s.includes("ge1.proj.weight") && s.includes("head.weight"));
        assert!(!s.includes("block0.bias") && !s.includes("ge0.grid") && !s.includes("grid.tv"));
        assert!(PruneScope::All.includes("grid.tv"));
    }
}
