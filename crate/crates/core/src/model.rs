//! The operator networks: a pointwise complex lifting, a stack of
//! spectral kernel-integration layers in either the plain Fourier (fno)
//! or fractional Fourier (cono) flavor, and a pointwise real projection.
//!
//! Both flavors share the layer skeleton
//!
//!   v_{l+1} = sigma( W v_l + b  +  T^{-1}( R (.) T v_l |_kept ) )
//!
//! where T is fft2 for fno and the order-alpha fractional transform for
//! cono (alpha is a learnable scalar per layer, initialized at 1 so cono
//! starts at the fno operating point). R mixes channels independently
//! per kept mode; sigma acts on real and imaginary parts separately.
//!
//! Kept-mode bookkeeping: the fno path keeps the standard corner sets
//! {0..kmax-1} u {H-kmax+1..H-1} x {0..kmax-1}. The cono path keeps the
//! same slots relocated by +floor(N/2) per axis, i.e. the centered block
//! of the fractional transform's sample grid. At alpha = 1 the centered
//! transform is the plain DFT conjugated by a cyclic shift, and the
//! layer is a convolution, so the shift cancels: slot j means the same
//! signed frequency in both flavors and the flavors coincide exactly
//! with equal weights. For alpha away from 1 the kept samples genuinely
//! move with alpha, which is what makes the order trainable. (Truncating
//! eigen-coefficients instead would cancel alpha out of the layer
//! entirely: the per-mode phases of T and T^{-1} annihilate around the
//! diagonal mixing R.)

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::frft::{
    build_basis, fno_kept_cols, fno_kept_rows, kept_unclamped, shift_kept, EmbedFrft2Op, Fft2Op,
    FrftBasis, KeptFrft2Op,
};
use crate::rng::Rng;
use crate::tensor::{Dtype, KeptGrid, NodeId, Result, Tape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Fno,
    Cono,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "split-gelu")]
    SplitGelu,
    #[serde(rename = "split-relu")]
    SplitRelu,
}

fn default_history_k() -> usize {
    10
}
fn default_modes() -> usize {
    12
}
fn default_width() -> usize {
    20
}
fn default_layers() -> usize {
    4
}
fn default_hidden() -> usize {
    128
}
fn default_coords() -> bool {
    true
}
fn default_activation() -> Activation {
    Activation::SplitGelu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub flavor: Flavor,
    #[serde(default = "default_history_k")]
    pub history_k: usize,
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_hidden")]
    pub projection_hidden: usize,
    #[serde(default = "default_coords")]
    pub append_coords: bool,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(flavor: Flavor) -> ModelConfig {
        ModelConfig {
            flavor,
            history_k: default_history_k(),
            modes: default_modes(),
            width: default_width(),
            n_layers: default_layers(),
            projection_hidden: default_hidden(),
            append_coords: default_coords(),
            activation: default_activation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_k < 1 || self.width < 1 || self.n_layers < 1 || self.modes < 1 || self.projection_hidden < 1 {
            return Err(TensorError::Invalid {
                op: "ModelConfig",
                detail: "history_k, modes, width, n_layers, projection_hidden must all be >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.history_k + if self.append_coords { 2 } else { 0 }
    }
}

/// Run label following the flavor(n_rollout) naming convention.
pub fn run_label(flavor: Flavor, n_rollout: usize) -> String {
    match flavor {
        Flavor::Fno => format!("FNO({n_rollout})"),
        Flavor::Cono => format!("CoNOAir({n_rollout})"),
    }
}

/// Kept-slot counts for a grid: axis 0 carries both frequency signs.
pub fn kept_counts(h: usize, w: usize, modes: usize) -> (usize, usize) {
    ((2 * modes - 1).min(h), modes.min(w))
}

/// Closed-form number of real scalar parameters (complex counts twice):
/// lift 2(width*cin + width); per layer 2 width^2 k0 k1 + 2 width^2 +
/// 2 width (+1 alpha for cono); projection (hidden*width + hidden) +
/// (hidden + 1).
pub fn expected_param_count(config: &ModelConfig, h: usize, w: usize) -> usize {
    let cin = config.input_channels();
    let (k0, k1) = kept_counts(h, w, config.modes);
    let wd = config.width;
    let hid = config.projection_hidden;
    let per_layer = 2 * wd * wd * k0 * k1 + 2 * wd * wd + 2 * wd + if config.flavor == Flavor::Cono { 1 } else { 0 };
    2 * (wd * cin + wd) + config.n_layers * per_layer + (hid * wd + hid) + (hid + 1)
}

enum Plumbing {
    Fno {
        kept: Arc<KeptGrid>,
    },
    Cono {
        bh: Arc<FrftBasis>,
        bw: Arc<FrftBasis>,
        rows: Arc<Vec<usize>>,
        cols: Arc<Vec<usize>>,
    },
}

fn build_plumbing(flavor: Flavor, h: usize, w: usize, modes: usize) -> Result<Plumbing> {
    let rows = fno_kept_rows(h, modes);
    let cols = fno_kept_cols(w, modes);
    match flavor {
        Flavor::Fno => Ok(Plumbing::Fno { kept: Arc::new(KeptGrid::new(h, w, rows, cols)?) }),
        Flavor::Cono => Ok(Plumbing::Cono {
            bh: Arc::new(build_basis(h)?),
            bw: Arc::new(build_basis(w)?),
            rows: Arc::new(shift_kept(&rows, h)),
            cols: Arc::new(shift_kept(&cols, w)),
        }),
    }
}

pub struct OperatorModel {
    pub config: ModelConfig,
    pub grid_h: usize,
    pub grid_w: usize,
    params: Vec<Tensor>,
    names: Vec<String>,
    plumbing: Plumbing,
}

impl OperatorModel {
    /// Fresh model bound to an H x W grid, parameters drawn from the
    /// "model-init" stream of `seed`. Spectral weights are uniform in
    /// +-1/width^2 per real component; dense maps are fan-in scaled.
    pub fn new(config: ModelConfig, h: usize, w: usize, seed: u64) -> Result<OperatorModel> {
        config.validate()?;
        if config.modes > h.min(w) {
            return Err(TensorError::Invalid {
                op: "OperatorModel::new",
                detail: format!("modes {} exceed grid {h}x{w}", config.modes),
            });
        }
        let mut rng = Rng::stream(seed, "model-init");
        let cin = config.input_channels();
        let wd = config.width;
        let hid = config.projection_hidden;
        let (k0, k1) = kept_counts(h, w, config.modes);

        let mut params = Vec::new();
        let mut names = Vec::new();
        let push = |t: Tensor, name: String, params: &mut Vec<Tensor>, names: &mut Vec<String>| {
            params.push(t);
            names.push(name);
        };

        push(complex_uniform(&mut rng, &[wd, cin], (3.0 / cin as f64).sqrt()), "lift.w".into(), &mut params, &mut names);
        push(complex_uniform(&mut rng, &[wd], 1.0 / (cin as f64).sqrt()), "lift.b".into(), &mut params, &mut names);
        for l in 0..config.n_layers {
            let s = 1.0 / (wd * wd) as f64;
            push(complex_uniform(&mut rng, &[wd, wd, k0, k1], s), format!("layer{l}.r"), &mut params, &mut names);
            push(complex_uniform(&mut rng, &[wd, wd], (3.0 / wd as f64).sqrt()), format!("layer{l}.w"), &mut params, &mut names);
            push(complex_uniform(&mut rng, &[wd], 1.0 / (wd as f64).sqrt()), format!("layer{l}.b"), &mut params, &mut names);
            if config.flavor == Flavor::Cono {
                push(Tensor::scalar(1.0), format!("layer{l}.alpha"), &mut params, &mut names);
            }
        }
        push(real_uniform(&mut rng, &[hid, wd], (6.0 / wd as f64).sqrt()), "proj1.w".into(), &mut params, &mut names);
        push(real_uniform(&mut rng, &[hid], 1.0 / (wd as f64).sqrt()), "proj1.b".into(), &mut params, &mut names);
        push(real_uniform(&mut rng, &[1, hid], (6.0 / hid as f64).sqrt()), "proj2.w".into(), &mut params, &mut names);
        push(real_uniform(&mut rng, &[1], 1.0 / (hid as f64).sqrt()), "proj2.b".into(), &mut params, &mut names);

        let plumbing = build_plumbing(config.flavor, h, w, config.modes)?;
        Ok(OperatorModel { config, grid_h: h, grid_w: w, params, names, plumbing })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.component_count()).sum()
    }

    /// Slot of a named parameter.
    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Replaces all parameters; shapes and dtypes must match slot for slot.
    pub fn set_params(&mut self, new: Vec<Tensor>) -> Result<()> {
        if new.len() != self.params.len() {
            return Err(TensorError::Invalid {
                op: "set_params",
                detail: format!("{} tensors for {} slots", new.len(), self.params.len()),
            });
        }
        for (i, (old, t)) in self.params.iter().zip(&new).enumerate() {
            if old.shape() != t.shape() || old.dtype() != t.dtype() {
                return Err(TensorError::Invalid {
                    op: "set_params",
                    detail: format!("slot {i} ({}) shape/dtype mismatch", self.names[i]),
                });
            }
        }
        self.params = new;
        Ok(())
    }

    pub fn set_param(&mut self, slot: usize, t: Tensor) -> Result<()> {
        if self.params[slot].shape() != t.shape() || self.params[slot].dtype() != t.dtype() {
            return Err(TensorError::Invalid {
                op: "set_param",
                detail: format!("slot {slot} ({}) shape/dtype mismatch", self.names[slot]),
            });
        }
        self.params[slot] = t;
        Ok(())
    }

    /// Binds every parameter to its slot on a fresh section of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        tape.bind_all(&self.params)
    }

    fn activation(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self.config.activation {
            Activation::SplitGelu => tape.gelu(x),
            Activation::SplitRelu => tape.relu(x),
        }
    }

    fn split_activation(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let re = tape.real_part(z)?;
        let im = tape.imag_part(z)?;
        let re = self.activation(tape, re)?;
        let im = self.activation(tape, im)?;
        tape.complex_from_parts(re, im)
    }

    /// One spectral layer applied to a (width,H,W) complex latent node.
    pub fn layer_tape(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        layer: usize,
        v: NodeId,
    ) -> Result<NodeId> {
        let shape = tape.value(v).shape().to_vec();
        let (wd, h, w) = (shape[0], shape[1], shape[2]);
        let stride = if self.config.flavor == Flavor::Cono { 4 } else { 3 };
        let base = 2 + layer * stride;
        let (r_id, w_id, b_id) = (params[base], params[base + 1], params[base + 2]);

        let plumbing;
        let plumbing_ref = if h == self.grid_h && w == self.grid_w {
            &self.plumbing
        } else {
            plumbing = build_plumbing(self.config.flavor, h, w, self.config.modes)?;
            &plumbing
        };

        let (k0, k1) = kept_counts(h, w, self.config.modes);
        let r3 = tape.reshape(r_id, &[wd, wd, k0 * k1])?;

        let spectral = match plumbing_ref {
            Plumbing::Fno { kept } => {
                let f = tape.custom(Arc::new(Fft2Op { inverse: false }), &[v])?;
                let zk = tape.extract_modes(f, kept.clone())?;
                let mixed = tape.mode_mul(r3, zk)?;
                let e = tape.embed_modes(mixed, kept.clone())?;
                tape.custom(Arc::new(Fft2Op { inverse: true }), &[e])?
            }
            Plumbing::Cono { bh, bw, rows, cols } => {
                let alpha = params[base + 3];
                let fwd = Arc::new(KeptFrft2Op {
                    bh: bh.clone(),
                    bw: bw.clone(),
                    rows: rows.clone(),
                    cols: cols.clone(),
                    sign: 1.0,
                });
                let zk3 = tape.custom(fwd, &[v, alpha])?;
                let zk = tape.reshape(zk3, &[wd, k0 * k1])?;
                let mixed = tape.mode_mul(r3, zk)?;
                let mixed3 = tape.reshape(mixed, &[wd, k0, k1])?;
                let inv = Arc::new(EmbedFrft2Op {
                    bh: bh.clone(),
                    bw: bw.clone(),
                    rows: rows.clone(),
                    cols: cols.clone(),
                    sign: -1.0,
                });
                tape.custom(inv, &[mixed3, alpha])?
            }
        };

        let vm = tape.reshape(v, &[wd, h * w])?;
        let wv = tape.matmul(w_id, vm)?;
        let wvb = tape.add_bias(wv, b_id)?;
        let local = tape.reshape(wvb, &[wd, h, w])?;

        let sum = tape.add(local, spectral)?;
        self.split_activation(tape, sum)
    }

    /// Full forward graph: real (k,H,W) history node -> real (1,H,W)
    /// prediction node. Accepts a different grid size than the bound one
    /// only for the fno flavor with unclamped kept sets at both sizes.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[NodeId], history: NodeId) -> Result<NodeId> {
        let shape = tape.value(history).shape().to_vec();
        if tape.value(history).dtype() != Dtype::Real || shape.len() != 3 || shape[0] != self.config.history_k {
            return Err(TensorError::Invalid {
                op: "forward",
                detail: format!(
                    "history must be real ({},H,W), got {:?}",
                    self.config.history_k,
                    shape
                ),
            });
        }
        let (h, w) = (shape[1], shape[2]);
        if (h, w) != (self.grid_h, self.grid_w) {
            if self.config.flavor == Flavor::Cono {
                return Err(TensorError::Invalid {
                    op: "forward",
                    detail: format!(
                        "cross-resolution evaluation is unsupported for the fractional flavor: \
                         the transform eigenbasis is grid-size dependent (bound {}x{}, got {h}x{w})",
                        self.grid_h, self.grid_w
                    ),
                });
            }
            if !kept_unclamped(self.grid_h, self.grid_w, self.config.modes)
                || !kept_unclamped(h, w, self.config.modes)
            {
                return Err(TensorError::Invalid {
                    op: "forward",
                    detail: format!(
                        "kept-mode sets clamp at {}x{} or {h}x{w}; slots would not transfer",
                        self.grid_h, self.grid_w
                    ),
                });
            }
        }

        let cin = self.config.input_channels();
        let x = if self.config.append_coords {
            let coords = tape.constant(coord_channels(h, w));
            tape.concat0(&[history, coords])?
        } else {
            history
        };
        let zero = tape.constant(Tensor::zeros(Dtype::Real, &[cin, h, w]));
        let xc = tape.complex_from_parts(x, zero)?;
        let xm = tape.reshape(xc, &[cin, h * w])?;

        let lifted = tape.matmul(params[0], xm)?;
        let lifted = tape.add_bias(lifted, params[1])?;
        let mut v = tape.reshape(lifted, &[self.config.width, h, w])?;

        for l in 0..self.config.n_layers {
            v = self.layer_tape(tape, params, l, v)?;
        }

        let stride = if self.config.flavor == Flavor::Cono { 4 } else { 3 };
        let pbase = 2 + self.config.n_layers * stride;
        let re = tape.real_part(v)?;
        let rm = tape.reshape(re, &[self.config.width, h * w])?;
        let p1 = tape.matmul(params[pbase], rm)?;
        let p1 = tape.add_bias(p1, params[pbase + 1])?;
        let a1 = self.activation(tape, p1)?;
        let p2 = tape.matmul(params[pbase + 2], a1)?;
        let p2 = tape.add_bias(p2, params[pbase + 3])?;
        tape.reshape(p2, &[1, h, w])
    }

    /// Autoregressive chain on one tape: n one-step predictions, each
    /// re-entering the history window. With `detach` the predictions
    /// re-enter as constants, cutting gradients between steps.
    pub fn rollout_tape(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        history: NodeId,
        n: usize,
        detach: bool,
    ) -> Result<Vec<NodeId>> {
        if n < 1 {
            return Err(TensorError::Invalid { op: "rollout", detail: "need n >= 1 steps".into() });
        }
        let k = self.config.history_k;
        let mut hist = history;
        let mut preds = Vec::with_capacity(n);
        for _ in 0..n {
            let pred = self.forward_tape(tape, params, hist)?;
            let chain = if detach { tape.constant(tape.value(pred).clone()) } else { pred };
            hist = if k == 1 {
                chain
            } else {
                let tail = tape.slice0(hist, 1, k - 1)?;
                tape.concat0(&[tail, chain])?
            };
            preds.push(pred);
        }
        Ok(preds)
    }

    /// Eager one-step forward.
    pub fn forward(&self, history: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let h = tape.constant(history.clone());
        let out = self.forward_tape(&mut tape, &params, h)?;
        Ok(tape.value(out).clone())
    }

    /// Eager n-step rollout, stacked (n,H,W).
    pub fn rollout(&self, history: &Tensor, n: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let h = tape.constant(history.clone());
        let preds = self.rollout_tape(&mut tape, &params, h, n, true)?;
        let stacked = tape.concat0(&preds)?;
        Ok(tape.value(stacked).clone())
    }

    /// Eager single-layer application, for layer-level comparisons.
    pub fn layer_eval(&self, layer: usize, v: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let vid = tape.constant(v.clone());
        let out = self.layer_tape(&mut tape, &params, layer, vid)?;
        Ok(tape.value(out).clone())
    }
}

/// Two coordinate channels, row index / H and column index / W. The i/N
/// convention (not i/(N-1)) keeps values at shared grid points identical
/// across a 2x refinement.
pub fn coord_channels(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * h * w);
    for i in 0..h {
        let v = i as f64 / h as f64;
        data.extend(std::iter::repeat(v).take(w));
    }
    for _ in 0..h {
        for j in 0..w {
            data.push(j as f64 / w as f64);
        }
    }
    Tensor::real(&[2, h, w], data).expect("coordinate channels are finite")
}

fn real_uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::real(shape, (0..n).map(|_| rng.uniform(-bound, bound)).collect()).expect("bounded draw is finite")
}

fn complex_uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<num_complex::Complex64> = (0..n)
        .map(|_| num_complex::Complex64::new(rng.uniform(-bound, bound), rng.uniform(-bound, bound)))
        .collect();
    Tensor::complex(shape, data).expect("bounded draw is finite")
}

/// Scales every parameter in place; used by tests that need a model in a
/// near-linear operating regime.
pub fn scale_params(model: &mut OperatorModel, factor: f64) {
    let scaled: Vec<Tensor> = model
        .params()
        .iter()
        .map(|t| {
            let mut c = t.clone();
            c.scale(factor);
            c
        })
        .collect();
    model.set_params(scaled).expect("shapes unchanged");
}

/// Spectral band-limited 2x upsampling of a real (C,H,W) tensor: zero-pad
/// the signed spectrum and renormalize. Shared grid points keep their
/// values exactly for band-limited fields.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    use num_complex::Complex64;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h2, w2) = (2 * h, 2 * w);
    let zeros = Tensor::zeros(Dtype::Real, &[c, h, w]);
    let mut tape = Tape::new();
    let xr = tape.constant(x.clone());
    let z = tape.constant(zeros);
    let xc = tape.complex_from_parts(xr, z)?;
    let f = tape.custom(Arc::new(Fft2Op { inverse: false }), &[xc])?;
    let spec = tape.value(f).complex_data().to_vec();

    let mut fine = vec![Complex64::new(0.0, 0.0); c * h2 * w2];
    let scale = 4.0; // (2H*2W)/(H*W)
    for ch in 0..c {
        for r in 0..h {
            // Signed row frequency; split the Nyquist row evenly.
            let sr = if r <= h / 2 { r as isize } else { r as isize - h as isize };
            for q in 0..w {
                let sq = if q <= w / 2 { q as isize } else { q as isize - w as isize };
                let val = spec[(ch * h + r) * w + q] * scale;
                let halve_r = h % 2 == 0 && r == h / 2;
                let halve_q = w % 2 == 0 && q == w / 2;
                let mut targets_r = vec![sr];
                if halve_r {
                    targets_r.push(-sr);
                }
                let mut targets_q = vec![sq];
                if halve_q {
                    targets_q.push(-sq);
                }
                let fr = 1.0 / targets_r.len() as f64;
                let fq = 1.0 / targets_q.len() as f64;
                for &tr in &targets_r {
                    for &tq in &targets_q {
                        let rr = ((tr + h2 as isize) % h2 as isize) as usize;
                        let qq = ((tq + w2 as isize) % w2 as isize) as usize;
                        fine[(ch * h2 + rr) * w2 + qq] += val * fr * fq;
                    }
                }
            }
        }
    }
    let fine_t = Tensor::complex(&[c, h2, w2], fine)?;
    let mut tape2 = Tape::new();
    let fid = tape2.constant(fine_t);
    let back = tape2.custom(Arc::new(Fft2Op { inverse: true }), &[fid])?;
    let out = tape2.real_part(back)?;
    Ok(tape2.value(out).clone())
}
