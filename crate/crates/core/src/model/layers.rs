//! Parameterized building blocks of the network. Each layer only stores
//! [`ParamId`]s; values live in the model's [`ParamStore`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;

pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: ChaCha8Rng,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `+-sqrt(3 / fan_in)` (unit-variance preserving).
    fn kaiming(&mut self, name: String, dims: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.gen_range(-bound..bound)))
            .collect();
        self.store.register(name, Tensor::new(dims.to_vec(), data)?)
    }

    fn fill(&mut self, name: String, dims: &[usize], v: f64) -> Result<ParamId> {
        self.store.register(name, Tensor::filled(dims, T::lit(v)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        let weight = init.kaiming(
            format!("{name}.weight"),
            &[cout, cin, geom.kt, geom.kf],
            cin * geom.taps(),
        )?;
        let bias = init.fill(format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Self { weight, bias, geom })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(p, self.weight);
        let b = tape.param(p, self.bias);
        tape.conv2d(x, w, Some(b), self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct TConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub f_out: usize,
}

impl TConv {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        f_out: usize,
    ) -> Result<Self> {
        let weight = init.kaiming(
            format!("{name}.weight"),
            &[cin, cout, geom.kt, geom.kf],
            cin * geom.taps(),
        )?;
        let bias = init.fill(format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Self {
            weight,
            bias,
            geom,
            f_out,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(p, self.weight);
        let b = tape.param(p, self.bias);
        tape.tconv2d(x, w, Some(b), self.geom, self.f_out)
    }
}

/// `feature(x) * sigmoid(gate(x))` over two convolutions of identical geometry.
#[derive(Debug, Clone)]
pub struct GatedConv {
    pub feature: Conv,
    pub gate: Conv,
}

impl GatedConv {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        Ok(Self {
            feature: Conv::new(init, &format!("{name}.feature"), cin, cout, geom)?,
            gate: Conv::new(init, &format!("{name}.gate"), cin, cout, geom)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let f = self.feature.forward(tape, p, x)?;
        let g = self.gate.forward(tape, p, x)?;
        let g = tape.sigmoid(g)?;
        tape.mul(f, g)
    }
}

#[derive(Debug, Clone)]
pub struct GatedTConv {
    pub feature: TConv,
    pub gate: TConv,
}

impl GatedTConv {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        f_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            feature: TConv::new(init, &format!("{name}.feature"), cin, cout, geom, f_out)?,
            gate: TConv::new(init, &format!("{name}.gate"), cin, cout, geom, f_out)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let f = self.feature.forward(tape, p, x)?;
        let g = self.gate.forward(tape, p, x)?;
        let g = tape.sigmoid(g)?;
        tape.mul(f, g)
    }
}

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, fin: usize, fout: usize) -> Result<Self> {
        Ok(Self {
            weight: init.kaiming(format!("{name}.weight"), &[fout, fin], fin)?,
            bias: init.fill(format!("{name}.bias"), &[fout], 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(p, self.weight);
        let b = tape.param(p, self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// Gated temporal convolution layer over a `[T, C, 1]` sequence:
/// pointwise squeeze, PReLU + instance norm, gated dilated conv pair,
/// pointwise restore, residual add.
#[derive(Debug, Clone)]
pub struct GtcnLayer {
    pub squeeze: Conv,
    pub prelu: ParamId,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub dconv: GatedConv,
    pub restore: Conv,
    /// Learned pointwise projection on the residual path (first layer of a block).
    pub residual: Option<Conv>,
}

impl GtcnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        hidden: usize,
        kernel: usize,
        dilation: usize,
        project_residual: bool,
    ) -> Result<Self> {
        let pw = ConvGeom::pointwise();
        let dgeom = ConvGeom {
            kt: kernel,
            kf: 1,
            stride_f: 1,
            dilation_t: dilation,
        };
        Ok(Self {
            squeeze: Conv::new(init, &format!("{name}.pconv_in"), cin, hidden, pw)?,
            prelu: init.fill(format!("{name}.prelu.alpha"), &[hidden], 0.25)?,
            norm_gamma: init.fill(format!("{name}.norm.gamma"), &[hidden], 1.0)?,
            norm_beta: init.fill(format!("{name}.norm.beta"), &[hidden], 0.0)?,
            dconv: GatedConv::new(init, &format!("{name}.dconv"), hidden, hidden, dgeom)?,
            restore: Conv::new(init, &format!("{name}.pconv_out"), hidden, cout, pw)?,
            residual: if project_residual {
                Some(Conv::new(init, &format!("{name}.residual"), cin, cout, pw)?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.squeeze.forward(tape, p, x)?;
        let alpha = tape.param(p, self.prelu);
        let h = tape.prelu(h, alpha)?;
        let g = tape.param(p, self.norm_gamma);
        let b = tape.param(p, self.norm_beta);
        let h = tape.instance_norm(h, g, b)?;
        let h = self.dconv.forward(tape, p, h)?;
        let out = self.restore.forward(tape, p, h)?;
        let res = match &self.residual {
            Some(proj) => proj.forward(tape, p, x)?,
            None => x,
        };
        tape.add(out, res)
    }
}

/// Stacked GTCN layers with increasing dilation.
#[derive(Debug, Clone)]
pub struct SgtcnBlock {
    pub layers: Vec<GtcnLayer>,
}

impl SgtcnBlock {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        width: usize,
        hidden: usize,
        kernel: usize,
        dilations: &[usize],
    ) -> Result<Self> {
        let layers = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let input = if i == 0 { cin } else { width };
                GtcnLayer::new(
                    init,
                    &format!("{name}.gtcn{i}"),
                    input,
                    width,
                    hidden,
                    kernel,
                    d,
                    i == 0,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, l| l.forward(tape, p, h))
    }
}
