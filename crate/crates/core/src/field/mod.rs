//! The radiance field: positional encoding followed by two identically shaped
//! MLPs (coarse and fine) mapping `(position, direction)` to density and color.
//!
//! Density goes through softplus and color through the logistic function, so
//! `sigma >= 0` and every color channel lies in `[0, 1]` for any input.
//! Gradients are computed by an explicit reverse pass over a recorded tape
//! (see [`Mlp::forward`] / [`Mlp::backward`]).

mod checkpoint;
mod encoding;
mod mlp;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, OptimizerSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoding::{encoded_len, positional_encode, EncodingConfig};
pub use mlp::{Activation, Architecture, Linear, Mlp, MlpTape, Real};

use crate::error::{Error, Result};
use crate::geometry::{UnitDir, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Coarse,
    Fine,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Coarse => "coarse",
            Branch::Fine => "fine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// Parameters of both branches plus the shared architecture.
///
/// The same type doubles as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<F> {
    pub arch: Architecture,
    pub coarse: Mlp<F>,
    pub fine: Mlp<F>,
}

impl<F: Real> FieldParams<F> {
    /// Fan-in uniform initialization; the two branches draw from
    /// independent streams of the same seed.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let coarse = Mlp::init(&arch, &mut rng);
        rng.set_stream(2);
        let fine = Mlp::init(&arch, &mut rng);
        Ok(Self { arch, coarse, fine })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            coarse: Mlp::zeros(&arch),
            fine: Mlp::zeros(&arch),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            coarse: Mlp::zeros(&self.arch),
            fine: Mlp::zeros(&self.arch),
        }
    }

    pub fn branch(&self, b: Branch) -> &Mlp<F> {
        match b {
            Branch::Coarse => &self.coarse,
            Branch::Fine => &self.fine,
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut Mlp<F> {
        match b {
            Branch::Coarse => &mut self.coarse,
            Branch::Fine => &mut self.fine,
        }
    }

    /// Named parameter blocks, coarse branch first.
    pub fn blocks(&self) -> Vec<(String, &[F])> {
        let mut out = Vec::new();
        for b in [Branch::Coarse, Branch::Fine] {
            for (name, block) in self.branch(b).blocks() {
                out.push((format!("{}.{name}", b.name()), block));
            }
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = self.coarse.blocks_mut();
        out.extend(self.fine.blocks_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.coarse.param_count() + self.fine.param_count()
    }

    /// Fails with the name of the first block holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (name, block) in self.blocks() {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { block: name });
            }
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        for b in self.blocks_mut() {
            b.fill(F::zero());
        }
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<G: Real>(&self) -> FieldParams<G> {
        let mut out = FieldParams::<G>::zeros(self.arch).expect("architecture already validated");
        for (dst, (_, src)) in out.blocks_mut().into_iter().zip(self.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = G::lit(s.to_f64().expect("finite float"));
            }
        }
        out
    }
}

/// Encodes sample positions and directions into network input matrices.
pub fn encode_samples<F: Real>(
    arch: &Architecture,
    points: &[Vec3],
    dirs: &[Vec3],
) -> (Array2<F>, Array2<F>) {
    assert_eq!(points.len(), dirs.len());
    let enc = arch.encoding;
    let (pd, dd) = (arch.pos_dim(), arch.dir_dim());
    let mut pos = Array2::zeros((points.len(), pd));
    let mut dir = Array2::zeros((points.len(), dd));
    let mut buf = vec![0.0f64; pd.max(dd)];
    for (k, (p, d)) in points.iter().zip(dirs).enumerate() {
        encoding::encode_into(&p.to_array(), enc.pos_freqs, enc.include_input, &mut buf[..pd]);
        for (dst, &v) in pos.row_mut(k).iter_mut().zip(&buf[..pd]) {
            *dst = F::lit(v);
        }
        encoding::encode_into(&d.to_array(), enc.dir_freqs, enc.include_input, &mut buf[..dd]);
        for (dst, &v) in dir.row_mut(k).iter_mut().zip(&buf[..dd]) {
            *dst = F::lit(v);
        }
    }
    (pos, dir)
}

/// Evaluates one branch at a batch of points; returns densities and colors.
pub fn field_eval_batch<F: Real>(
    params: &FieldParams<F>,
    points: &[Vec3],
    dirs: &[Vec3],
    branch: Branch,
) -> Result<Vec<FieldOutput>> {
    let (pos, dir) = encode_samples::<F>(&params.arch, points, dirs);
    let tape = params
        .branch(branch)
        .forward(&params.arch, pos, dir.view(), branch.name())?;
    Ok(tape
        .sigma
        .iter()
        .zip(tape.color.rows())
        .map(|(s, c)| FieldOutput {
            sigma: s.to_f64().unwrap_or(f64::NAN),
            color: [
                c[0].to_f64().unwrap_or(f64::NAN),
                c[1].to_f64().unwrap_or(f64::NAN),
                c[2].to_f64().unwrap_or(f64::NAN),
            ],
        })
        .collect())
}

pub fn field_eval<F: Real>(
    params: &FieldParams<F>,
    x: Vec3,
    d: UnitDir,
    branch: Branch,
) -> Result<FieldOutput> {
    let mut out = field_eval_batch(params, &[x], &[d.vec()], branch)?;
    Ok(out.remove(0))
}
