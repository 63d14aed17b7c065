use crate::conv::{self, Conv2dOptions, ConvGeom, TransposedGeom};
use crate::tape::{Activation, BinaryOp, Op};
use crate::{Error, Result, Tape, Tensor, Var};

impl Tape {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Config(format!(
                "{what}: shapes {:?} and {:?} differ (no broadcasting)",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = match kind {
            BinaryOp::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            BinaryOp::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            BinaryOp::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
        };
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(0.0)),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push(value, Op::Activation(kind, x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    /// `sqrt(x² + eps²)`, a differentiable stand-in for `|x|`.
    pub fn smooth_abs(&mut self, x: Var, eps: f64) -> Result<Var> {
        let eps2 = eps * eps;
        let value = self.value(x).map(|v| (v * v + eps2).sqrt());
        self.push(value, Op::SmoothAbs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `Σ weights[i]·x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Config(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                self.value(x).numel()
            )));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(v, w)| v * w)
            .sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { input: x, weights })
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        opts: Conv2dOptions,
    ) -> Result<Var> {
        let geom = ConvGeom::resolve(self.value(input).dims4()?, self.shape(weight), opts)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::Config(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    self.shape(b),
                    geom.cout
                )));
            }
        }
        let xp = conv::pad_input(self.value(input).data(), &geom);
        let data = conv::conv2d_forward(
            &xp,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_parts(vec![geom.n, geom.cout, geom.ho, geom.wo], data);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    /// Transposed convolution (weight Cin×Cout×k×k) that must exactly double
    /// the spatial size, e.g. kernel 4, stride 2, padding 1.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let geom = TransposedGeom::resolve(dims, self.shape(weight), stride, padding)?;
        if geom.ho != 2 * geom.h || geom.wo != 2 * geom.w {
            return Err(Error::Config(format!(
                "transposed conv maps {}×{} to {}×{}, expected exact doubling",
                geom.h, geom.w, geom.ho, geom.wo
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::Config(format!(
                    "conv_transpose2d bias shape {:?}, expected [{}]",
                    self.shape(b),
                    geom.cout
                )));
            }
        }
        let data = conv::conv_transpose2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_parts(vec![geom.n, geom.cout, geom.ho, geom.wo], data);
        self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    /// Per-channel `x·scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::Config(format!(
                "channel_affine expects [{c}] scale/shift, got {:?}/{:?}",
                self.shape(scale),
                self.shape(shift)
            )));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut data = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for j in off..off + plane {
                    data[j] = x[j] * sc[ci] + sh[ci];
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![n, c, h, w], data),
            Op::ChannelAffine {
                input,
                scale,
                shift,
            },
        )
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat of zero tensors".into()));
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut c_total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Config(format!(
                    "concat: {:?} does not match batch/spatial dims of {:?}",
                    self.shape(p),
                    self.shape(first)
                )));
            }
            c_total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c_total * plane);
        for ni in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.value(p).data()[ni * c * plane..][..c * plane]);
            }
        }
        let value = Tensor::from_parts(vec![n, c_total, h, w], data);
        self.push(value, Op::Concat(parts.to_vec()))
    }

    /// N×C×H×W → N×C×1×1 spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        self.push(
            Tensor::from_parts(vec![n, c, 1, 1], data),
            Op::GlobalAvgPool(x),
        )
    }

    /// Divides each sample by `sqrt(mean(x²) + eps²)` over C×H×W. Smooth
    /// everywhere, zero maps to zero, and maps with RMS ≫ eps come out at unit RMS.
    pub fn rms_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, ..) = self.value(x).dims4()?;
        if !(eps > 0.0) {
            return Err(Error::Config(format!(
                "rms_normalize eps must be positive, got {eps}"
            )));
        }
        let t = self.value(x);
        let m = t.numel() / n;
        let mut data = Vec::with_capacity(t.numel());
        let mut divisors = Vec::with_capacity(n);
        for chunk in t.data().chunks(m) {
            let ms = chunk.iter().map(|v| v * v).sum::<f64>() / m as f64;
            let s = (ms + eps * eps).sqrt();
            divisors.push(s);
            data.extend(chunk.iter().map(|v| v / s));
        }
        let shape = t.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, data),
            Op::RmsNormalize { input: x, divisors },
        )
    }

    /// N×C×1×1 → N×C×H×W by repetition.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, xh, xw) = self.value(x).dims4()?;
        if (xh, xw) != (1, 1) || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "broadcast_spatial needs a 1×1 map and a positive target, got {xh}×{xw} → {h}×{w}"
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(h * w))
            .collect();
        self.push(
            Tensor::from_parts(vec![n, c, h, w], data),
            Op::BroadcastSpatial(x),
        )
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
