//! Attention layers with per-layer trace hooks.
//!
//! Each layer computes `Attn(Q, K, V) = softmax(QKᵀ/√d)·V` over token rows,
//! where `Q = W_Q(φ)` comes from the layer input and `K = W_K(ψ)`,
//! `V = W_V(ψ)` come from the same tokens (self-attention) or from the text
//! embedding sequence (cross-attention). The output projection result is
//! added back onto the input stream.
//!
//! Three run modes thread through every forward pass:
//!
//! * `Normal` — plain computation.
//! * `Capture` — additionally clone Q/K/V per (layer, timestep) into an
//!   [`AttentionTrace`]. Captures never perturb the numeric output.
//! * `Inject` — target layers replace K/V with entries from a style trace
//!   and blend their query with the content trace's query:
//!   `Q̃ = γ·Q_content + (1−γ)·Q_own`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::Rng;

use super::ops::{attention_backward, attention_with_cache, AttnCache, Linear};
use super::GradStore;
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, ProjKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    SelfAttn,
    Cross,
}

/// Which pipeline pass produced a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunTag {
    Content,
    Style,
    Stylized,
}

/// Q/K/V snapshot for one layer at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

/// All snapshots captured during one sampling or inversion run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub run_tag: RunTag,
    entries: BTreeMap<(String, usize), TraceEntry>,
}

impl AttentionTrace {
    pub fn new(run_tag: RunTag) -> Self {
        Self { run_tag, entries: BTreeMap::new() }
    }

    /// Record one snapshot. Each (layer, timestep) pair may be captured at
    /// most once per run; a duplicate means a stale trace was reused.
    pub fn insert(&mut self, layer_id: &str, timestep: usize, entry: TraceEntry) -> Result<()> {
        let key = (layer_id.to_string(), timestep);
        if self.entries.contains_key(&key) {
            return Err(Error::Config(format!(
                "trace already holds layer '{layer_id}' at timestep {timestep}; \
                 install a fresh trace per run"
            )));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    pub fn get(&self, layer_id: &str, timestep: usize) -> Option<&TraceEntry> {
        self.entries.get(&(layer_id.to_string(), timestep))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn layers(&self) -> BTreeSet<String> {
        self.entries.keys().map(|(l, _)| l.clone()).collect()
    }

    pub fn timesteps(&self) -> BTreeSet<usize> {
        self.entries.keys().map(|&(_, t)| t).collect()
    }
}

/// One blended-query record from an injection run.
#[derive(Debug, Clone)]
pub struct InjectRecord {
    pub layer_id: String,
    pub timestep: usize,
    /// The query the stylized pass computed from its own features.
    pub own_q: Array2<f64>,
    /// The query actually used: `γ·Q_content + (1−γ)·own_q`.
    pub blended_q: Array2<f64>,
}

/// Per-instance attention behavior, set via `set_attention_mode`.
#[derive(Debug, Clone, Default)]
pub enum AttentionMode {
    #[default]
    Normal,
    Capture {
        /// Layers to record; `None` captures every attention layer.
        target_layers: Option<BTreeSet<String>>,
        trace: AttentionTrace,
    },
    Inject {
        gamma: f64,
        target_layers: BTreeSet<String>,
        content: Arc<AttentionTrace>,
        style: Arc<AttentionTrace>,
        /// Blended queries recorded as the run proceeds.
        log: Vec<InjectRecord>,
    },
}

impl AttentionMode {
    pub fn capture_all(run_tag: RunTag) -> Self {
        AttentionMode::Capture { target_layers: None, trace: AttentionTrace::new(run_tag) }
    }
}

/// A self- or cross-attention block over token rows, with residual output.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub layer_id: String,
    pub kind: AttentionKind,
    /// Projection width (Q/K/V all map into R^d).
    pub d: usize,
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wout: Linear,
}

/// Forward state needed by [`AttentionLayer::backward`].
pub struct AttnLayerCache {
    x: Array2<f64>,
    psi: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    head_caches: Vec<AttnCache>,
    attn_out: Array2<f64>,
}

impl AttentionLayer {
    /// `d_in` is the token width of φ, `d_psi` of ψ (equal to `d_in` for
    /// self-attention). The output projection starts at zero so a fresh
    /// block is the identity map on its residual stream.
    pub fn new<R: Rng>(
        layer_id: &str,
        kind: AttentionKind,
        d_in: usize,
        d_psi: usize,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && d % heads == 0, "head count must divide projection width");
        let std_q = (1.0 / d_in as f64).sqrt();
        let std_kv = (1.0 / d_psi as f64).sqrt();
        let mut wout = Linear::new(&format!("{layer_id}.wout"), d, d_in, false, 0.0, rng);
        wout.w.fill(0.0);
        Self {
            layer_id: layer_id.to_string(),
            kind,
            d,
            heads,
            wq: Linear::new(&format!("{layer_id}.wq"), d_in, d, false, std_q, rng),
            wk: Linear::new(&format!("{layer_id}.wk"), d_psi, d, false, std_kv, rng),
            wv: Linear::new(&format!("{layer_id}.wv"), d_psi, d, false, std_kv, rng),
            wout,
        }
    }

    fn project(&self, lin: &Linear, x: &Array2<f64>, proj: ProjKind, adapters: &AdapterSet) -> Array2<f64> {
        let mut y = lin.forward(x);
        if let Some(ad) = adapters.get(&self.layer_id, proj) {
            // Fresh adapters have B = 0 and alpha may be 0; skip the matmuls
            // so a no-op adapter cannot perturb bits.
            if ad.alpha != 0.0 && ad.b.iter().any(|&v| v != 0.0) {
                y += &ad.delta_out(x);
            }
        }
        y
    }

    /// Multi-head attention on already-projected Q/K/V.
    fn run_heads(&self, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<(Array2<f64>, Vec<AttnCache>)> {
        if self.heads == 1 {
            let (out, cache) = attention_with_cache(q, k, v)?;
            return Ok((out, vec![cache]));
        }
        let hd = self.d / self.heads;
        let mut out = Array2::zeros((q.nrows(), self.d));
        let mut caches = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let (o, c) = attention_with_cache(
                &q.slice(cols).to_owned(),
                &k.slice(cols).to_owned(),
                &v.slice(cols).to_owned(),
            )?;
            out.slice_mut(cols).assign(&o);
            caches.push(c);
        }
        Ok((out, caches))
    }

    /// Forward pass. `x` are the layer's tokens (n×d_in), `psi` the
    /// attended tokens (self: same as `x`; cross: text embedding rows).
    /// Returns `x + W_out(Attn(...))` and the cache for backward.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        psi: &Array2<f64>,
        timestep: usize,
        mode: &mut AttentionMode,
        adapters: &AdapterSet,
    ) -> Result<(Array2<f64>, AttnLayerCache)> {
        if psi.ncols() != self.wk.d_in() {
            return Err(Error::Shape(format!(
                "layer '{}': attended width {} does not match projection input width {}",
                self.layer_id,
                psi.ncols(),
                self.wk.d_in()
            )));
        }
        let q_own = self.project(&self.wq, x, ProjKind::Q, adapters);

        let (q, k, v) = match mode {
            AttentionMode::Inject { gamma, target_layers, content, style, log }
                if target_layers.contains(&self.layer_id) =>
            {
                let need = |trace: &AttentionTrace| -> Result<TraceEntry> {
                    trace.get(&self.layer_id, timestep).cloned().ok_or_else(|| Error::Injection {
                        layer: self.layer_id.clone(),
                        timestep,
                    })
                };
                let content_entry = need(content)?;
                let style_entry = need(style)?;
                if content_entry.q.dim() != q_own.dim() {
                    return Err(Error::Shape(format!(
                        "layer '{}': captured content Q is {:?} but this run produces {:?}",
                        self.layer_id,
                        content_entry.q.dim(),
                        q_own.dim()
                    )));
                }
                let blended = crate::style::blend_queries(&content_entry.q, &q_own, *gamma)?;
                log.push(InjectRecord {
                    layer_id: self.layer_id.clone(),
                    timestep,
                    own_q: q_own.clone(),
                    blended_q: blended.clone(),
                });
                (blended, style_entry.k, style_entry.v)
            }
            _ => {
                let k = self.project(&self.wk, psi, ProjKind::K, adapters);
                let v = self.project(&self.wv, psi, ProjKind::V, adapters);
                (q_own.clone(), k, v)
            }
        };

        if let AttentionMode::Capture { target_layers, trace } = mode {
            let targeted = target_layers
                .as_ref()
                .map_or(true, |set| set.contains(&self.layer_id));
            if targeted {
                trace.insert(
                    &self.layer_id,
                    timestep,
                    TraceEntry { q: q.clone(), k: k.clone(), v: v.clone() },
                )?;
            }
        }

        let (attn_out, head_caches) = self.run_heads(&q, &k, &v)?;
        let projected = self.wout.forward(&attn_out);
        let out = x + &projected;
        Ok((
            out,
            AttnLayerCache {
                x: x.clone(),
                psi: psi.clone(),
                q,
                k,
                v,
                head_caches,
                attn_out,
            },
        ))
    }

    /// Backward pass for normal-mode forwards. Returns (dx, dpsi); for
    /// self-attention the caller should feed `psi = x` and sum the two.
    pub fn backward(
        &self,
        cache: &AttnLayerCache,
        dy: &Array2<f64>,
        adapters: &AdapterSet,
        grads: &mut GradStore,
    ) -> (Array2<f64>, Array2<f64>) {
        // Residual: dy flows to x directly and through the attention path.
        let d_attn = self.wout.backward(&cache.attn_out, dy, grads);

        let (mut dq, mut dk, mut dv);
        if self.heads == 1 {
            let (a, b, c) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.head_caches[0], &d_attn);
            (dq, dk, dv) = (a, b, c);
        } else {
            let hd = self.d / self.heads;
            dq = Array2::zeros(cache.q.dim());
            dk = Array2::zeros(cache.k.dim());
            dv = Array2::zeros(cache.v.dim());
            for h in 0..self.heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let (a, b, c) = attention_backward(
                    &cache.q.slice(cols).to_owned(),
                    &cache.k.slice(cols).to_owned(),
                    &cache.v.slice(cols).to_owned(),
                    &cache.head_caches[h],
                    &d_attn.slice(cols).to_owned(),
                );
                dq.slice_mut(cols).assign(&a);
                dk.slice_mut(cols).assign(&b);
                dv.slice_mut(cols).assign(&c);
            }
        }

        let mut dx = dy.clone();
        dx += &self.backward_projection(&self.wq, ProjKind::Q, &cache.x, &dq, adapters, grads);
        let mut dpsi = self.backward_projection(&self.wk, ProjKind::K, &cache.psi, &dk, adapters, grads);
        dpsi += &self.backward_projection(&self.wv, ProjKind::V, &cache.psi, &dv, adapters, grads);
        (dx, dpsi)
    }

    fn backward_projection(
        &self,
        lin: &Linear,
        proj: ProjKind,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        adapters: &AdapterSet,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let mut dx = lin.backward(x, dy, grads);
        if let Some(ad) = adapters.get(&self.layer_id, proj) {
            dx += &ad.backward(x, dy, grads);
        }
        dx
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &ndarray::ArrayD<f64>)) {
        self.wq.visit_params(f);
        self.wk.visit_params(f);
        self.wv.visit_params(f);
        self.wout.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        self.wq.visit_params_mut(f);
        self.wk.visit_params_mut(f);
        self.wv.visit_params_mut(f);
        self.wout.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(seed: u64) -> AttentionLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = AttentionLayer::new("t.self", AttentionKind::SelfAttn, 6, 6, 6, 1, &mut rng);
        // A zero output projection would make mode differences invisible.
        l.wout.w = crate::nn::gaussian(&[6, 6], 0.3, &mut rng);
        l
    }

    fn tokens(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rand::Rng::gen::<f64>(&mut rng) - 0.5)
    }

    #[test]
    fn capture_mode_is_bitwise_non_intrusive() {
        let l = layer(1);
        let x = tokens(4, 6, 2);
        let ad = AdapterSet::new();
        let mut normal = AttentionMode::Normal;
        let (base, _) = l.forward(&x, &x, 3, &mut normal, &ad).unwrap();
        let mut capture = AttentionMode::capture_all(RunTag::Content);
        let (traced, _) = l.forward(&x, &x, 3, &mut capture, &ad).unwrap();
        assert_eq!(base, traced);
        if let AttentionMode::Capture { trace, .. } = capture {
            assert_eq!(trace.len(), 1);
            let entry = trace.get("t.self", 3).unwrap();
            assert_eq!(entry.q.dim(), (4, 6));
        } else {
            unreachable!()
        }
    }

    #[test]
    fn duplicate_capture_is_rejected() {
        let l = layer(1);
        let x = tokens(4, 6, 2);
        let ad = AdapterSet::new();
        let mut capture = AttentionMode::capture_all(RunTag::Content);
        l.forward(&x, &x, 3, &mut capture, &ad).unwrap();
        assert!(matches!(
            l.forward(&x, &x, 3, &mut capture, &ad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inject_gamma_one_uses_content_queries_and_style_kv() {
        let l = layer(1);
        let ad = AdapterSet::new();
        let content_x = tokens(4, 6, 10);
        let style_x = tokens(4, 6, 11);

        let mut cap_c = AttentionMode::capture_all(RunTag::Content);
        l.forward(&content_x, &content_x, 5, &mut cap_c, &ad).unwrap();
        let AttentionMode::Capture { trace: content, .. } = cap_c else { unreachable!() };
        let mut cap_s = AttentionMode::capture_all(RunTag::Style);
        l.forward(&style_x, &style_x, 5, &mut cap_s, &ad).unwrap();
        let AttentionMode::Capture { trace: style, .. } = cap_s else { unreachable!() };

        let content = Arc::new(content);
        let style = Arc::new(style);
        let mut inject = AttentionMode::Inject {
            gamma: 1.0,
            target_layers: BTreeSet::from(["t.self".to_string()]),
            content: content.clone(),
            style: style.clone(),
            log: Vec::new(),
        };
        let run_x = tokens(4, 6, 12);
        l.forward(&run_x, &run_x, 5, &mut inject, &ad).unwrap();
        let AttentionMode::Inject { log, .. } = inject else { unreachable!() };
        assert_eq!(log.len(), 1);
        // gamma = 1 reproduces the captured content query bit-for-bit.
        assert_eq!(log[0].blended_q, content.get("t.self", 5).unwrap().q);
        assert_ne!(log[0].own_q, log[0].blended_q);
    }

    #[test]
    fn inject_missing_timestep_names_layer_and_step() {
        let l = layer(1);
        let ad = AdapterSet::new();
        let x = tokens(4, 6, 2);
        let mut inject = AttentionMode::Inject {
            gamma: 0.5,
            target_layers: BTreeSet::from(["t.self".to_string()]),
            content: Arc::new(AttentionTrace::new(RunTag::Content)),
            style: Arc::new(AttentionTrace::new(RunTag::Style)),
            log: Vec::new(),
        };
        match l.forward(&x, &x, 7, &mut inject, &ad).map(|_| ()) {
            Err(Error::Injection { layer, timestep }) => {
                assert_eq!(layer, "t.self");
                assert_eq!(timestep, 7);
            }
            other => panic!("expected injection error, got {other:?}"),
        }
    }

    #[test]
    fn non_target_layers_ignore_inject_mode() {
        let l = layer(1);
        let ad = AdapterSet::new();
        let x = tokens(4, 6, 2);
        let mut normal = AttentionMode::Normal;
        let (base, _) = l.forward(&x, &x, 7, &mut normal, &ad).unwrap();
        let mut inject = AttentionMode::Inject {
            gamma: 0.5,
            target_layers: BTreeSet::from(["other.layer".to_string()]),
            content: Arc::new(AttentionTrace::new(RunTag::Content)),
            style: Arc::new(AttentionTrace::new(RunTag::Style)),
            log: Vec::new(),
        };
        let (inj, _) = l.forward(&x, &x, 7, &mut inject, &ad).unwrap();
        assert_eq!(base, inj);
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut l = AttentionLayer::new("t.cross", AttentionKind::Cross, 5, 3, 4, 2, &mut rng);
        l.wout.w = crate::nn::gaussian(&[4, 5], 0.4, &mut rng);
        let x = tokens(6, 5, 40);
        let psi = tokens(2, 3, 41);
        let lw = tokens(6, 5, 42);
        let ad = AdapterSet::new();
        let loss = |l: &AttentionLayer, x: &Array2<f64>, psi: &Array2<f64>| {
            let mut mode = AttentionMode::Normal;
            (&l.forward(x, psi, 1, &mut mode, &ad).unwrap().0 * &lw).sum()
        };

        let mut mode = AttentionMode::Normal;
        let (_, cache) = l.forward(&x, &psi, 1, &mut mode, &ad).unwrap();
        let mut grads = GradStore::new();
        let (dx, dpsi) = l.backward(&cache, &lw, &ad, &mut grads);

        let h = 1e-6;
        // One weight from each projection.
        type Getter = fn(&mut AttentionLayer) -> &mut ndarray::ArrayD<f64>;
        let probes: [(&str, Getter); 4] = [
            ("t.cross.wq.w", |l| &mut l.wq.w),
            ("t.cross.wk.w", |l| &mut l.wk.w),
            ("t.cross.wv.w", |l| &mut l.wv.w),
            ("t.cross.wout.w", |l| &mut l.wout.w),
        ];
        for (name, get) in probes {
            let g = grads.get(name).unwrap().to_owned();
            for idx in [0usize, 3] {
                let mut plus = l.clone();
                get(&mut plus).as_slice_mut().unwrap()[idx] += h;
                let mut minus = l.clone();
                get(&mut minus).as_slice_mut().unwrap()[idx] -= h;
                let num = (loss(&plus, &x, &psi) - loss(&minus, &x, &psi)) / (2.0 * h);
                assert!(
                    (g.as_slice().unwrap()[idx] - num).abs() < 1e-6,
                    "param {name}[{idx}]"
                );
            }
        }
        // Input gradients.
        let mut xp = x.clone();
        xp[(0, 0)] += h;
        let mut xm = x.clone();
        xm[(0, 0)] -= h;
        let num = (loss(&l, &xp, &psi) - loss(&l, &xm, &psi)) / (2.0 * h);
        assert!((dx[(0, 0)] - num).abs() < 1e-6);
        let mut pp = psi.clone();
        pp[(1, 2)] += h;
        let mut pm = psi.clone();
        pm[(1, 2)] -= h;
        let num = (loss(&l, &x, &pp) - loss(&l, &x, &pm)) / (2.0 * h);
        assert!((dpsi[(1, 2)] - num).abs() < 1e-6);
    }

    #[test]
    fn cond_width_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let l = AttentionLayer::new("t.cross", AttentionKind::Cross, 5, 3, 4, 1, &mut rng);
        let x = tokens(6, 5, 51);
        let psi = tokens(2, 4, 52);
        let mut mode = AttentionMode::Normal;
        assert!(matches!(
            l.forward(&x, &psi, 1, &mut mode, &AdapterSet::new()),
            Err(Error::Shape(_))
        ));
    }
}
