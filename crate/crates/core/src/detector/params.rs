// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DetectorConfig;
use crate::engine::Tensor;
use crate::refine::GateParams;
use crate::seed::derive_seed;

/// Per-head weights and the optional width-changing shortcut of one GAT layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams {
    pub heads: Vec<Tensor>,
    pub shortcut: Option<Tensor>,
}

impl GatLayerParams {
    pub fn in_dim(&self) -> usize {
        self.heads[0].rows()
    }

    pub fn out_dim(&self) -> usize {
        self.heads.iter().map(Tensor::cols).sum()
    }
}

/// Every learnable tensor of the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub config: DetectorConfig,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub gate: GateParams,
    pub gat_layers: Vec<GatLayerParams>,
    /// `(weight, bias)` of the optional classifier hidden layer.
    pub classifier_hidden: Option<(Tensor, Tensor)>,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

/// Glorot-uniform weights.
pub(crate) fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::random_uniform(rows, cols, -bound, bound, rng)
}

impl DetectorParams {
    /// Glorot-uniform weights, zero biases, gate scale `a = 1` and offset
    /// `b = 0`. Draws come from the `init` stream of `config.seed`.
    pub fn init(config: &DetectorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init", 0));
        let proj_w = glorot(config.input_dim, config.proj_dim, &mut rng);
        let proj_b = Tensor::zeros(1, config.proj_dim);
        let gate = GateParams::init(config.ablation.gate_input_dim(), config.gate_hidden, &mut rng);
        let mut gat_layers = Vec::with_capacity(config.gat_dims.len());
        let mut c_in = config.proj_dim;
        for &c_out in &config.gat_dims {
            let per_head = c_out / config.heads;
            let heads = (0..config.heads).map(|_| glorot(c_in, per_head, &mut rng)).collect();
            let shortcut = (c_in != c_out).then(|| glorot(c_in, c_out, &mut rng));
            gat_layers.push(GatLayerParams { heads, shortcut });
            c_in = c_out;
        }
        let pooled = config.pooled_dim();
        let classifier_hidden = config
            .classifier_hidden
            .map(|h| (glorot(pooled, h, &mut rng), Tensor::zeros(1, h)));
        let head_in = config.classifier_hidden.unwrap_or(pooled);
        Self {
            config: config.clone(),
            proj_w,
            proj_b,
            gate,
            gat_layers,
            classifier_hidden,
            classifier_w: glorot(head_in, 2, &mut rng),
            classifier_b: Tensor::zeros(1, 2),
        }
    }

    /// All tensors with stable names, in declaration order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![("proj_w".into(), &self.proj_w), ("proj_b".into(), &self.proj_b)];
        v.extend(self.gate.named());
        for (k, layer) in self.gat_layers.iter().enumerate() {
            for (h, w) in layer.heads.iter().enumerate() {
                v.push((format!("gat{k}_head{h}"), w));
            }
            if let Some(s) = &layer.shortcut {
                v.push((format!("gat{k}_shortcut"), s));
            }
        }
        if let Some((w, b)) = &self.classifier_hidden {
            v.push(("cls_hidden_w".into(), w));
            v.push(("cls_hidden_b".into(), b));
        }
        v.push(("cls_w".into(), &self.classifier_w));
        v.push(("cls_b".into(), &self.classifier_b));
        v
    }

    /// Mutable counterpart of [`DetectorParams::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> = vec![("proj_w".into(), &mut self.proj_w), ("proj_b".into(), &mut self.proj_b)];
        v.extend(self.gate.named_mut());
        for (k, layer) in self.gat_layers.iter_mut().enumerate() {
            for (h, w) in layer.heads.iter_mut().enumerate() {
                v.push((format!("gat{k}_head{h}"), w));
            }
            if let Some(s) = &mut layer.shortcut {
                v.push((format!("gat{k}_shortcut"), s));
            }
        }
        if let Some((w, b)) = &mut self.classifier_hidden {
            v.push(("cls_hidden_w".into(), w));
            v.push(("cls_hidden_b".into(), b));
        }
        v.push(("cls_w".into(), &mut self.classifier_w));
        v.push(("cls_b".into(), &mut self.classifier_b));
        v
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters that the optimizer must leave untouched.
    pub fn is_frozen(&self, name: &str) -> bool {
        self.config.freeze_gate_scale && (name == "gate_a" || name == "gate_b")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let p = DetectorParams::init(&DetectorConfig::with_input_dim(10));
        assert_eq!(p.proj_w.shape(), [10, 128]);
        assert_eq!(p.gat_layers[0].heads.len(), 4);
        assert_eq!(p.gat_layers[0].heads[0].shape(), [128, 16]);
        assert_eq!(p.gat_layers[0].shortcut.as_ref().unwrap().shape(), [128, 64]);
        assert!(p.gat_layers[1].shortcut.is_none());
        assert_eq!(p.classifier_w.shape(), [128, 2]);
        assert_eq!(p.gate.a.item(), 1.0);
        assert_eq!(p.gate.b.item(), 0.0);
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let p = DetectorParams::init(&DetectorConfig::with_input_dim(4));
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
        assert_eq!(names.first().unwrap(), "proj_w");
        assert_eq!(names.last().unwrap(), "cls_b");
        let mut_names: Vec<String> = DetectorParams::init(&DetectorConfig::with_input_dim(4))
            .named_mut()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let c = DetectorConfig::with_input_dim(6);
        assert_eq!(DetectorParams::init(&c), DetectorParams::init(&c));
        let c2 = DetectorConfig { seed: 1, ..c.clone() };
        assert_ne!(DetectorParams::init(&c).proj_w, DetectorParams::init(&c2).proj_w);
    }
}
