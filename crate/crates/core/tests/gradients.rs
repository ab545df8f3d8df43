use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use panonerf_core::field::{encode_samples, Activation, Architecture, EncodingConfig, FieldParams, Branch};
use panonerf_core::geometry::{Ray, UnitDir, Vec3};
use panonerf_core::rendering::{render_rays, render_rays_backward, RayRender, RenderGrad, SamplingConfig};

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut g = || Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    let pts: Vec<Vec3> = (0..n).map(|_| g() * 0.7).collect();
    let dirs = (0..n).map(|_| UnitDir::normalize(g()).unwrap().vec()).collect();
    (pts, dirs)
}

/// `Σ a·σ + Σ b·c` over one branch, and its analytic parameter gradient.
fn check_mlp(arch: Architecture, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = FieldParams::<f64>::init(arch, seed).unwrap();
    for block in params.blocks_mut() {
        for v in block.iter_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let m = 6;
    let (pts, dirs) = random_points(m, &mut rng);
    let a: Array1<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let b: Array2<f64> = Array2::from_shape_fn((m, 3), |_| rng.sample(StandardNormal));
    let loss = |p: &FieldParams<f64>| {
        let (pos, dir) = encode_samples::<f64>(&p.arch, &pts, &dirs);
        let tape = p.branch(Branch::Coarse).forward(&p.arch, pos, dir.view(), "coarse").unwrap();
        (&tape.sigma * &a).sum() + (&tape.color * &b).sum()
    };
    let (pos, dir) = encode_samples::<f64>(&arch, &pts, &dirs);
    let tape = params.branch(Branch::Coarse).forward(&arch, pos, dir.view(), "coarse").unwrap();
    let mut grads = params.zeros_like();
    params
        .branch(Branch::Coarse)
        .backward(&arch, &tape, a.view(), b.view(), grads.branch_mut(Branch::Coarse));
    let analytic: Vec<f64> = grads.blocks().into_iter().flat_map(|(_, g)| g.to_vec()).collect();

    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut k = 0;
    let n_blocks = params.blocks().len();
    for bi in 0..n_blocks {
        let len = params.blocks()[bi].1.len();
        for j in 0..len {
            let orig = params.blocks_mut()[bi][j];
            params.blocks_mut()[bi][j] = orig + h;
            let up = loss(&params);
            params.blocks_mut()[bi][j] = orig - h;
            let down = loss(&params);
            params.blocks_mut()[bi][j] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[k];
            k += 1;
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-7));
        }
    }
    worst
}

fn small(depth: usize, skip: Option<usize>) -> Architecture {
    Architecture {
        depth,
        width: 8,
        skip,
        color_width: 8,
        activation: Activation::Softplus,
        encoding: EncodingConfig {
            pos_freqs: 3,
            dir_freqs: 2,
            include_input: true,
        },
    }
}

#[test]
fn two_layer_width_eight_matches_finite_differences() {
    let worst = check_mlp(small(2, None), 1);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn skip_connection_matches_finite_differences() {
    let worst = check_mlp(small(3, Some(0)), 2);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn rendered_color_gradient_matches_finite_differences() {
    // Coarse-only rendering with deterministic samples: sample positions do
    // not depend on the parameters, so the full pipeline is differentiable.
    let arch = small(2, None);
    let mut params = FieldParams::<f64>::init(arch, 3).unwrap();
    let cfg = SamplingConfig {
        n_coarse: 12,
        n_fine: 0,
        near: 0.1,
        far: 2.5,
        perturb: false,
        seed: 0,
        chunk_rays: 2,
    };
    let rays: Vec<Ray> = [Vec3::new(1.0, 0.2, 0.1), Vec3::new(-0.3, 0.8, -0.5), Vec3::new(0.1, -0.4, 0.9)]
        .iter()
        .map(|&d| Ray {
            origin: Vec3::new(0.05, 0.0, -0.1),
            dir: UnitDir::normalize(d).unwrap(),
        })
        .collect();
    let target = [[0.9, 0.1, 0.3], [0.2, 0.2, 0.8], [0.5, 0.6, 0.1]];
    let depth_gt = [1.0, 1.7, 0.6];
    let loss = |p: &FieldParams<f64>| -> f64 {
        render_rays(p, &rays, &cfg, 0)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(r, rr)| {
                let o = &rr.coarse;
                (0..3).map(|c| (o.color[c] - target[r][c]).powi(2)).sum::<f64>()
                    + 0.3 * (o.depth - depth_gt[r]).powi(2)
                    + 0.2 * o.depth_var
            })
            .sum()
    };
    let mut grads = params.zeros_like();
    let mut g = |r: usize, rr: &RayRender| {
        let o = &rr.coarse;
        (
            RenderGrad {
                color: [0, 1, 2].map(|c| 2.0 * (o.color[c] - target[r][c])),
                depth: 0.6 * (o.depth - depth_gt[r]),
                depth_var: 0.2,
            },
            RenderGrad::default(),
        )
    };
    render_rays_backward(&params, &mut grads, &rays, &cfg, 0, &mut g).unwrap();
    let analytic: Vec<f64> = grads.blocks().into_iter().flat_map(|(_, g)| g.to_vec()).collect();
    let h = 1e-4;
    let mut k = 0;
    let mut worst = 0.0f64;
    for bi in 0..params.blocks().len() {
        for j in 0..params.blocks()[bi].1.len() {
            let orig = params.blocks_mut()[bi][j];
            params.blocks_mut()[bi][j] = orig + h;
            let up = loss(&params);
            params.blocks_mut()[bi][j] = orig - h;
            let down = loss(&params);
            params.blocks_mut()[bi][j] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(1e-7));
            k += 1;
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}
