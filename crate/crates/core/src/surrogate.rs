//! Physics-informed surrogate of the circulation.
//!
//! Four independent tanh MLPs map `[fourier(t), u]` to the LV, aortic,
//! arterial and LA volumes; the venous volume closes the total. Time
//! derivatives come from pushing the analytic tangent of the Fourier
//! features through each network alongside the primal pass, and
//! [`SurrogateModel::backward`] runs reverse accumulation through both
//! passes, so losses on `dV/dt` get exact weight gradients.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::{wrap_time, ModelConstants, Multipliers, StateVolumes, N_PARAMS};
use crate::sampling::{ParameterSpace, VolumeScaling};

/// Periodic time features `sin(2 pi k t / T_c), cos(2 pi k t / T_c)`,
/// interleaved per harmonic `k = 1..=n_harmonics`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierEmbedding {
    pub n_harmonics: usize,
    pub t_c: f64,
}

impl FourierEmbedding {
    pub fn new(n_harmonics: usize, t_c: f64) -> Self {
        Self { n_harmonics, t_c }
    }

    pub fn n_features(&self) -> usize {
        2 * self.n_harmonics
    }

    /// Features at `t` (wrapped into the cycle) and their time derivatives.
    pub fn embed_with_tangent(&self, t: f64, feat: &mut [f64], dfeat: &mut [f64]) {
        let tw = wrap_time(t, self.t_c);
        let w0 = 2.0 * std::f64::consts::PI / self.t_c;
        for k in 1..=self.n_harmonics {
            let w = w0 * k as f64;
            let (s, c) = (w * tw).sin_cos();
            feat[2 * (k - 1)] = s;
            feat[2 * k - 1] = c;
            dfeat[2 * (k - 1)] = w * c;
            dfeat[2 * k - 1] = -w * s;
        }
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let mut f = vec![0.0; self.n_features()];
        let mut d = vec![0.0; self.n_features()];
        self.embed_with_tangent(t, &mut f, &mut d);
        f
    }
}

/// Hidden width and depth of each of the four networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: usize,
    pub depth: usize,
}

impl Architecture {
    pub const FULL: Self = Self {
        hidden: 256,
        depth: 4,
    };
    pub const DESK: Self = Self {
        hidden: 64,
        depth: 3,
    };
}

/// Fully connected tanh network with a linear scalar output.
///
/// Parameters are stored flat, layer by layer: the `in x out` weight matrix
/// in row-major order followed by the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Primal and tangent activations of one network over a batch.
#[derive(Debug, Clone)]
struct NetTape {
    /// Hidden activations `h_l = tanh(z_l)`.
    hs: Vec<Array2<f64>>,
    /// Hidden pre-activation tangents `dz_l`.
    dzs: Vec<Array2<f64>>,
    /// Hidden activation tangents `dh_l = (1 - h_l^2) dz_l`.
    dhs: Vec<Array2<f64>>,
    y: Array1<f64>,
    dy: Array1<f64>,
}

impl Mlp {
    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(widths: Vec<usize>) -> Self {
        let n = Self::param_count(&widths);
        Self {
            widths,
            params: vec![0.0; n],
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and biases.
    pub fn init<R: Rng>(widths: Vec<usize>, rng: &mut R) -> Self {
        let mut net = Self::zeros(widths);
        let mut off = 0;
        for l in 0..net.n_layers() {
            let (fan_in, out) = (net.widths[l], net.widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * out + out] {
                *p = rng.gen_range(-bound..bound);
            }
            off += fan_in * out + out;
        }
        net
    }

    pub fn from_params(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(FormatError::ShapeMismatch(format!("invalid widths {widths:?}")).into());
        }
        let n = Self::param_count(&widths);
        if params.len() != n {
            return Err(FormatError::ShapeMismatch(format!(
                "widths {widths:?} need {n} parameters, got {}",
                params.len()
            ))
            .into());
        }
        Ok(Self { widths, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn layer_offset(&self, l: usize) -> usize {
        Self::param_count(&self.widths[..=l])
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fan_in, out) = (self.widths[l], self.widths[l + 1]);
        let off = self.layer_offset(l);
        let w = ArrayView2::from_shape((fan_in, out), &self.params[off..off + fan_in * out])
            .expect("layer shape");
        let b = ArrayView1::from(&self.params[off + fan_in * out..off + fan_in * out + out]);
        (w, b)
    }

    /// Primal and tangent pass. Only the first `dx.ncols()` input columns
    /// carry a tangent.
    fn forward_tape(&self, x: &Array2<f64>, dx: &Array2<f64>) -> NetTape {
        let n_layers = self.n_layers();
        let nt = dx.ncols();
        let mut hs: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        let mut dzs: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        let mut dhs: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let (mut z, dz) = if l == 0 {
                (x.dot(&w), dx.dot(&w.slice(s![..nt, ..])))
            } else {
                (hs[l - 1].dot(&w), dhs[l - 1].dot(&w))
            };
            z += &b;
            if l + 1 < n_layers {
                z.mapv_inplace(f64::tanh);
                let mut dh = dz.clone();
                Zip::from(&mut dh)
                    .and(&z)
                    .for_each(|d, &h| *d *= 1.0 - h * h);
                hs.push(z);
                dzs.push(dz);
                dhs.push(dh);
            } else {
                return NetTape {
                    hs,
                    dzs,
                    dhs,
                    y: z.column(0).to_owned(),
                    dy: dz.column(0).to_owned(),
                };
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Accumulates into `grad` the gradient of a loss whose adjoints with
    /// respect to the output `y` and its tangent `dy` are `gy` and `gdy`.
    fn backward_tape(
        &self,
        x: &Array2<f64>,
        dx: &Array2<f64>,
        tape: &NetTape,
        gy: &Array1<f64>,
        gdy: &Array1<f64>,
        grad: &mut [f64],
    ) {
        let n_layers = self.n_layers();
        let nt = dx.ncols();
        let b = gy.len();
        let mut gz = gy.clone().into_shape_with_order((b, 1)).expect("column");
        let mut gdz = gdy.clone().into_shape_with_order((b, 1)).expect("column");
        for l in (0..n_layers).rev() {
            let (fan_in, out) = (self.widths[l], self.widths[l + 1]);
            let off = self.layer_offset(l);
            let (w, _) = self.layer(l);
            let gw = if l == 0 {
                let mut gw = x.t().dot(&gz);
                let tangent = dx.t().dot(&gdz);
                gw.slice_mut(s![..nt, ..]).scaled_add(1.0, &tangent);
                gw
            } else {
                let mut gw = tape.hs[l - 1].t().dot(&gz);
                gw.scaled_add(1.0, &tape.dhs[l - 1].t().dot(&gdz));
                gw
            };
            let gb = gz.sum_axis(Axis(0));
            {
                let gw_flat = gw.as_standard_layout();
                let gw_flat = gw_flat.as_slice().expect("standard layout");
                for (g, v) in grad[off..off + fan_in * out].iter_mut().zip(gw_flat) {
                    *g += v;
                }
                for (g, v) in grad[off + fan_in * out..off + fan_in * out + out]
                    .iter_mut()
                    .zip(gb.iter())
                {
                    *g += v;
                }
            }
            if l > 0 {
                let ga = gz.dot(&w.t());
                let mut gda = gdz.dot(&w.t());
                let h = &tape.hs[l - 1];
                let dz = &tape.dzs[l - 1];
                // h = tanh(z), dh = (1 - h^2) dz
                let mut next_gz = ga;
                Zip::from(&mut next_gz)
                    .and(&mut gda)
                    .and(h)
                    .and(dz)
                    .for_each(|g, gd, &h, &dz| {
                        let s = 1.0 - h * h;
                        *g = *g * s - 2.0 * h * s * dz * *gd;
                        *gd *= s;
                    });
                gz = next_gz;
                gdz = gda;
            }
        }
    }
}

/// Model outputs over a batch, with what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct BatchEval {
    /// Predicted volumes per point, (lv, ao, art, vc, la).
    pub volumes: Vec<[f64; 5]>,
    /// Predicted `dV/dt` per point (ml/ms).
    pub derivs: Vec<[f64; 5]>,
    x: Array2<f64>,
    dx: Array2<f64>,
    tapes: Vec<NetTape>,
}

impl BatchEval {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

/// Compartments predicted directly by a network, as indices into the
/// (lv, ao, art, vc, la) order.
pub const NET_COMPARTMENTS: [usize; 4] = [0, 1, 2, 4];
const VC: usize = 3;

/// Four-network PINN with its input/output scaling metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub nets: [Mlp; 4],
    pub embedding: FourierEmbedding,
    pub space: ParameterSpace,
    pub scaling: VolumeScaling,
    /// Smooth-valve sharpness the model was last trained with.
    pub alpha: f64,
    pub constants: ModelConstants,
}

impl SurrogateModel {
    pub fn input_width(embedding: &FourierEmbedding) -> usize {
        embedding.n_features() + N_PARAMS
    }

    fn widths(arch: Architecture, embedding: &FourierEmbedding) -> Vec<usize> {
        let mut w = vec![Self::input_width(embedding)];
        w.extend(std::iter::repeat_n(arch.hidden, arch.depth));
        w.push(1);
        w
    }

    /// Randomly initialised model.
    pub fn new(
        arch: Architecture,
        n_harmonics: usize,
        space: ParameterSpace,
        scaling: VolumeScaling,
        alpha: f64,
        constants: ModelConstants,
        seed: u64,
    ) -> Result<Self> {
        if arch.hidden == 0 || arch.depth == 0 || n_harmonics == 0 {
            return Err(Error::InvalidArgument(format!(
                "architecture {arch:?} with {n_harmonics} harmonics is empty"
            )));
        }
        space.validate()?;
        scaling.validate()?;
        let embedding = FourierEmbedding::new(n_harmonics, constants.t_c);
        let widths = Self::widths(arch, &embedding);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = [(); 4].map(|_| Mlp::init(widths.clone(), &mut rng));
        Ok(Self {
            nets,
            embedding,
            space,
            scaling,
            alpha,
            constants,
        })
    }

    pub fn architecture(&self) -> Architecture {
        let w = self.nets[0].widths();
        Architecture {
            hidden: w[1],
            depth: w.len() - 2,
        }
    }

    pub fn n_params(&self) -> usize {
        self.nets.iter().map(|n| n.params().len()).sum()
    }

    /// All weights and biases, network by network.
    pub fn theta(&self) -> Vec<f64> {
        self.nets
            .iter()
            .flat_map(|n| n.params().iter().copied())
            .collect()
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::Contract(format!(
                "theta has {} entries, model has {}",
                theta.len(),
                self.n_params()
            )));
        }
        let mut off = 0;
        for net in &mut self.nets {
            let n = net.params().len();
            net.params_mut().copy_from_slice(&theta[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Applies `f(index, &mut weight)` over the flattened parameter vector.
    pub fn update_theta(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut off = 0;
        for net in &mut self.nets {
            let n = net.params().len();
            for (i, p) in net.params_mut().iter_mut().enumerate() {
                f(off + i, p);
            }
            off += n;
        }
    }

    fn check_unit(u: &[f64; N_PARAMS]) -> Result<()> {
        for (i, &x) in u.iter().enumerate() {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::OutOfRange {
                    index: i,
                    value: x,
                    lower: 0.0,
                    upper: 1.0,
                });
            }
        }
        Ok(())
    }

    /// Evaluates volumes and their time derivatives at every `(t, u)` pair,
    /// keeping the activations for [`SurrogateModel::backward`].
    pub fn eval_batch(&self, times: &[f64], inputs: &[[f64; N_PARAMS]]) -> Result<BatchEval> {
        if times.len() != inputs.len() {
            return Err(Error::Contract(format!(
                "{} times but {} inputs",
                times.len(),
                inputs.len()
            )));
        }
        let b = times.len();
        let nf = self.embedding.n_features();
        let mut x = Array2::<f64>::zeros((b, nf + N_PARAMS));
        let mut dx = Array2::<f64>::zeros((b, nf));
        for (k, (&t, u)) in times.iter().zip(inputs).enumerate() {
            Self::check_unit(u)?;
            let mut row = x.row_mut(k);
            let row = row.as_slice_mut().expect("contiguous row");
            let mut drow = dx.row_mut(k);
            let drow = drow.as_slice_mut().expect("contiguous row");
            self.embedding.embed_with_tangent(t, &mut row[..nf], drow);
            row[nf..].copy_from_slice(u);
        }
        let tapes: Vec<NetTape> = self.nets.iter().map(|n| n.forward_tape(&x, &dx)).collect();
        let brackets = self.scaling.brackets();
        let v_total = self.constants.v_total;
        let mut volumes = vec![[0.0; 5]; b];
        let mut derivs = vec![[0.0; 5]; b];
        for k in 0..b {
            let (mut sum, mut dsum) = (0.0, 0.0);
            for (n, &comp) in NET_COMPARTMENTS.iter().enumerate() {
                let v = brackets[n].mid() + brackets[n].half_width() * tapes[n].y[k];
                let dv = brackets[n].half_width() * tapes[n].dy[k];
                volumes[k][comp] = v;
                derivs[k][comp] = dv;
                sum += v;
                dsum += dv;
            }
            volumes[k][VC] = v_total - sum;
            derivs[k][VC] = -dsum;
        }
        Ok(BatchEval {
            volumes,
            derivs,
            x,
            dx,
            tapes,
        })
    }

    /// Gradient with respect to all weights (in [`SurrogateModel::theta`]
    /// order) of a loss whose adjoints with respect to the predicted volumes
    /// and predicted time derivatives are `g_vol` and `g_der`.
    pub fn backward(
        &self,
        eval: &BatchEval,
        g_vol: &[[f64; 5]],
        g_der: &[[f64; 5]],
    ) -> Result<Vec<f64>> {
        let b = eval.len();
        if g_vol.len() != b || g_der.len() != b || eval.tapes.len() != 4 {
            return Err(Error::Contract(format!(
                "adjoint batch of {}/{} for an evaluation of {b} points",
                g_vol.len(),
                g_der.len()
            )));
        }
        let brackets = self.scaling.brackets();
        let mut grad = vec![0.0; self.n_params()];
        let mut off = 0;
        for (n, &comp) in NET_COMPARTMENTS.iter().enumerate() {
            let half = brackets[n].half_width();
            // The venous closure feeds back into every network output.
            let gy: Array1<f64> = (0..b)
                .map(|k| half * (g_vol[k][comp] - g_vol[k][VC]))
                .collect();
            let gdy: Array1<f64> = (0..b)
                .map(|k| half * (g_der[k][comp] - g_der[k][VC]))
                .collect();
            let len = self.nets[n].params().len();
            self.nets[n].backward_tape(
                &eval.x,
                &eval.dx,
                &eval.tapes[n],
                &gy,
                &gdy,
                &mut grad[off..off + len],
            );
            off += len;
        }
        Ok(grad)
    }

    /// Predicted volumes at time `t` (ms) for unit-cube inputs `u`.
    pub fn forward(&self, t: f64, u: &[f64; N_PARAMS]) -> Result<StateVolumes> {
        let e = self.eval_batch(&[t], &[*u])?;
        Ok(StateVolumes::from_array(e.volumes[0]))
    }

    /// Exact `dV/dt` of [`SurrogateModel::forward`].
    pub fn time_derivative(&self, t: f64, u: &[f64; N_PARAMS]) -> Result<[f64; 5]> {
        Ok(self.eval_batch(&[t], &[*u])?.derivs[0])
    }

    /// Volume waveforms at the given times for physical multipliers.
    pub fn predict(&self, m: &Multipliers, times: &[f64]) -> Result<Vec<StateVolumes>> {
        let u = self.space.to_unit(m)?;
        let inputs = vec![u; times.len()];
        let e = self.eval_batch(times, &inputs)?;
        Ok(e.volumes
            .into_iter()
            .map(StateVolumes::from_array)
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            format_version: FORMAT_VERSION,
            widths: self.nets.iter().map(|n| n.widths().to_vec()).collect(),
            param_counts: self.nets.iter().map(|n| n.params().len()).collect(),
            n_harmonics: self.embedding.n_harmonics,
            alpha: self.alpha,
            constants: self.constants,
            space: self.space.clone(),
            scaling: self.scaling,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for net in &self.nets {
            for p in net.params() {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let hlen = u64::from_le_bytes(cur.take(8, "header length")?.try_into().expect("8 bytes"));
        let header: ModelHeader = serde_json::from_slice(cur.take(hlen as usize, "header")?)
            .map_err(|e| FormatError::ShapeMismatch(format!("unreadable header: {e}")))?;
        if header.widths.len() != 4 || header.param_counts.len() != 4 {
            return Err(FormatError::ShapeMismatch("expected four networks".into()).into());
        }
        let embedding = FourierEmbedding::new(header.n_harmonics, header.constants.t_c);
        let mut nets = Vec::with_capacity(4);
        for (widths, &count) in header.widths.iter().zip(&header.param_counts) {
            if widths.first() != Some(&Self::input_width(&embedding)) || widths.last() != Some(&1) {
                return Err(FormatError::ShapeMismatch(format!(
                    "network widths {widths:?} do not match {} inputs and one output",
                    Self::input_width(&embedding)
                ))
                .into());
            }
            if Mlp::param_count(widths) != count {
                return Err(FormatError::ShapeMismatch(format!(
                    "widths {widths:?} imply {} parameters, header says {count}",
                    Mlp::param_count(widths)
                ))
                .into());
            }
            let raw = cur.take(count * 8, "weights")?;
            let params = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            nets.push(Mlp::from_params(widths.clone(), params)?);
        }
        if !cur.is_empty() {
            return Err(FormatError::ShapeMismatch("trailing bytes after weights".into()).into());
        }
        header.space.validate()?;
        header.scaling.validate()?;
        let nets: [Mlp; 4] = nets.try_into().expect("four networks");
        Ok(Self {
            nets,
            embedding,
            space: header.space,
            scaling: header.scaling,
            alpha: header.alpha,
            constants: header.constants,
        })
    }
}

pub const MAGIC: &[u8; 8] = b"HPNNMODL";
pub const FORMAT_VERSION: u32 = 1;

/// JSON header of the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub format_version: u32,
    pub widths: Vec<Vec<usize>>,
    pub param_counts: Vec<usize>,
    pub n_harmonics: usize,
    pub alpha: f64,
    pub constants: ModelConstants,
    pub space: ParameterSpace,
    pub scaling: VolumeScaling,
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
            .into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::Bracket;

    pub(crate) fn test_scaling() -> VolumeScaling {
        VolumeScaling::from_brackets([
            Bracket {
                min: 20.0,
                max: 140.0,
            },
            Bracket {
                min: 100.0,
                max: 180.0,
            },
            Bracket {
                min: 950.0,
                max: 1350.0,
            },
            Bracket {
                min: 15.0,
                max: 90.0,
            },
        ])
    }

    fn small_model(hidden: usize, depth: usize, seed: u64) -> SurrogateModel {
        SurrogateModel::new(
            Architecture { hidden, depth },
            6,
            ParameterSpace::default(),
            test_scaling(),
            0.01,
            ModelConstants::default(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn embedding_values() {
        let e = FourierEmbedding::new(6, 800.0);
        let f0 = e.embed(0.0);
        assert_eq!(f0.len(), 12);
        for k in 0..6 {
            assert_eq!(f0[2 * k], 0.0);
            assert_eq!(f0[2 * k + 1], 1.0);
        }
        let half = e.embed(400.0);
        assert!(half[0].abs() < 1e-15);
        assert!((half[1] + 1.0).abs() < 1e-15);
        let a = e.embed(37.5);
        let b = e.embed(837.5);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_network_gives_bracket_midpoints() {
        let mut m = small_model(8, 2, 1);
        for net in &mut m.nets {
            net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        }
        let v = m.forward(123.0, &[0.5; N_PARAMS]).unwrap();
        let s = test_scaling();
        assert_eq!(v.lv, s.lv.mid());
        assert_eq!(v.ao, s.ao.mid());
        assert_eq!(v.art, s.art.mid());
        assert_eq!(v.la, s.la.mid());
        assert_eq!(
            m.time_derivative(123.0, &[0.5; N_PARAMS]).unwrap(),
            [0.0; 5]
        );
    }

    #[test]
    fn rejects_inputs_outside_cube() {
        let m = small_model(4, 1, 2);
        let mut u = [0.5; N_PARAMS];
        u[3] = 1.5;
        assert!(matches!(
            m.forward(0.0, &u),
            Err(Error::OutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn time_derivative_matches_finite_difference() {
        let m = small_model(16, 2, 3);
        let u = [0.3, 0.7, 0.1, 0.9, 0.5, 0.2, 0.4, 0.6, 0.8, 0.35];
        for t in [0.0, 55.0, 410.0, 799.0] {
            let d = m.time_derivative(t, &u).unwrap();
            let h = 1e-3;
            let up = m.forward(t + h, &u).unwrap().to_array();
            let dn = m.forward(t - h, &u).unwrap().to_array();
            for i in 0..5 {
                let fd = (up[i] - dn[i]) / (2.0 * h);
                assert!(
                    (fd - d[i]).abs() <= 1e-5 * fd.abs().max(1e-3),
                    "{i}: {fd} vs {}",
                    d[i]
                );
            }
        }
    }

    #[test]
    fn gradient_of_zero_loss_is_zero() {
        let m = small_model(4, 2, 4);
        let e = m.eval_batch(&[1.0, 2.0], &[[0.5; N_PARAMS]; 2]).unwrap();
        let g = m.backward(&e, &[[0.0; 5]; 2], &[[0.0; 5]; 2]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(m.backward(&e, &[[0.0; 5]; 1], &[[0.0; 5]; 2]).is_err());
    }

    #[test]
    fn duplicated_point_doubles_gradient() {
        let m = small_model(6, 2, 5);
        let u = [0.25; N_PARAMS];
        let gv = [[0.3, -0.1, 0.2, 0.05, 0.7]];
        let gd = [[1.0, 0.4, -0.6, 0.2, -0.3]];
        let one = m.eval_batch(&[100.0], &[u]).unwrap();
        let g1 = m.backward(&one, &gv, &gd).unwrap();
        let two = m.eval_batch(&[100.0, 100.0], &[u, u]).unwrap();
        let g2 = m.backward(&two, &[gv[0], gv[0]], &[gd[0], gd[0]]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let m = small_model(64, 3, 6);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = SurrogateModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.architecture(), Architecture::DESK);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            SurrogateModel::read_from(&mut bad.as_slice()),
            Err(Error::Format(FormatError::BadMagic))
        ));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(
            SurrogateModel::read_from(&mut bad.as_slice()),
            Err(Error::Format(FormatError::VersionMismatch { found: 9, .. }))
        ));
        let short = &buf[..buf.len() - 5];
        assert!(matches!(
            SurrogateModel::read_from(&mut &short[..]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));
        let mut longer = buf.clone();
        longer.extend_from_slice(&[0u8; 8]);
        assert!(matches!(
            SurrogateModel::read_from(&mut longer.as_slice()),
            Err(Error::Format(FormatError::ShapeMismatch(_)))
        ));
    }

    fn probe_loss(
        m: &SurrogateModel,
        times: &[f64],
        inputs: &[[f64; N_PARAMS]],
    ) -> (f64, Vec<f64>) {
        // L = sum_k sum_i c_i V_i + d_i dV_i + 0.5 w dV_i^2
        let c = [0.3, -0.2, 0.01, 0.05, 0.4];
        let d = [2.0, -1.5, 0.7, 0.2, -0.9];
        let w = 3.0;
        let e = m.eval_batch(times, inputs).unwrap();
        let mut loss = 0.0;
        let mut gv = Vec::new();
        let mut gd = Vec::new();
        for k in 0..e.len() {
            let mut gdk = [0.0; 5];
            for i in 0..5 {
                loss += c[i] * e.volumes[k][i]
                    + d[i] * e.derivs[k][i]
                    + 0.5 * w * e.derivs[k][i].powi(2);
                gdk[i] = d[i] + w * e.derivs[k][i];
            }
            gv.push(c);
            gd.push(gdk);
        }
        (loss, m.backward(&e, &gv, &gd).unwrap())
    }

    #[test]
    fn gradient_matches_finite_difference_on_every_weight() {
        let mut m = small_model(2, 2, 7);
        let times = [12.0, 333.0, 700.0];
        let inputs = [[0.2; N_PARAMS], [0.9; N_PARAMS], [0.5; N_PARAMS]];
        let (_, g) = probe_loss(&m, &times, &inputs);
        let theta = m.theta();
        for i in 0..theta.len() {
            let h = 1e-5;
            let mut tp = theta.clone();
            tp[i] += h;
            m.set_theta(&tp).unwrap();
            let lp = probe_loss(&m, &times, &inputs).0;
            tp[i] -= 2.0 * h;
            m.set_theta(&tp).unwrap();
            let lm = probe_loss(&m, &times, &inputs).0;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(err < 1e-4, "weight {i}: fd {fd} vs {}", g[i]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit() -> impl Strategy<Value = [f64; N_PARAMS]> {
            proptest::array::uniform10(0.0..=1.0f64)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn closure_and_periodicity(seed in any::<u64>(), k in 0u32..(800 * 1024), u in unit()) {
                // Dyadic times keep t + T_c exact in floating point.
                let t = k as f64 / 1024.0;
                let m = small_model(8, 2, seed);
                let e = m.eval_batch(&[t, t + 800.0], &[u, u]).unwrap();
                let total: f64 = e.volumes[0].iter().sum();
                prop_assert!((total - m.constants.v_total).abs() <= 1e-12 * m.constants.v_total);
                let dsum: f64 = e.derivs[0].iter().sum();
                let dscale: f64 = e.derivs[0].iter().map(|x| x.abs()).sum::<f64>().max(1e-300);
                prop_assert!(dsum.abs() <= 1e-14 * dscale);
                prop_assert_eq!(e.volumes[0], e.volumes[1]);
                prop_assert_eq!(e.derivs[0], e.derivs[1]);
            }

            #[test]
            fn multipliers_and_unit_inputs_agree(u in unit(), t in 0.0..800.0f64) {
                let m = small_model(8, 2, 11);
                let mult = m.space.from_unit(&u).unwrap();
                let via_m = m.predict(&mult, &[t]).unwrap()[0];
                let via_u = m.forward(t, &m.space.to_unit(&mult).unwrap()).unwrap();
                prop_assert_eq!(via_m, via_u);
                let direct = m.forward(t, &u).unwrap();
                for (a, b) in direct.to_array().iter().zip(via_u.to_array()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
