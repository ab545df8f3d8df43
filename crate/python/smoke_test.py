"""Smoke test for the panonerf extension module.

Build and run from the repository root:

    cargo build -p panonerf-py --features extension-module
    cp target/debug/libpanonerf.so python/panonerf.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import panonerf  # noqa: E402


def main():
    pano = panonerf.synth_box(32, 16)
    assert (pano.width, pano.height) == (32, 16)
    assert len(pano.rgb()) == 3 * 32 * 16
    assert all(d > 0 for d in pano.depth())
    print(pano)

    same = panonerf.reproject(pano, (0.0, 0.0, 0.0))
    assert same.rgb() == pano.rgb()
    assert math.isinf(panonerf.psnr(pano, same))
    moved = panonerf.reproject(pano, (0.1, 0.0, 0.0))
    assert 0.5 < moved.valid_fraction() < 1.0
    print("ssim vs moved view", round(panonerf.ssim(pano, moved), 4))

    poses = panonerf.virtual_poses(4, 0.2, 7)
    assert poses[0] == (0.0, 0.0, 0.0) and len(poses) == 4

    cfg = panonerf.Config({
        "train.iters": "6",
        "train.batch_rays": "32",
        "train.n_coarse": "8",
        "train.n_fine": "8",
        "train.losses.k_sc": "3",
        "train.semantic.width": "16",
        "train.semantic.height": "8",
        "train.semantic.n_coarse": "4",
    })
    assert cfg.iters == 6
    assert panonerf.lr_at(0, cfg) == 5e-4
    assert any(k == "train.losses.lambda_geo" for k, _ in panonerf.Config.keys())
    try:
        cfg.set("train.nope", "1")
        raise AssertionError("unknown key accepted")
    except ValueError as e:
        assert str(e).startswith("config:")

    with tempfile.TemporaryDirectory() as tmp:
        trainer = panonerf.Trainer(pano, cfg)
        first = trainer.step()
        assert first["iter"] == 0 and first["sc_loss"] != 0.0
        trainer.run(tmp)
        assert trainer.iteration == 6
        assert len(trainer.log()) == 6
        assert os.path.isfile(os.path.join(tmp, "final.ckpt"))

        ckpt = panonerf.Checkpoint.load(os.path.join(tmp, "final.ckpt"))
        assert ckpt.iteration == 6
        view = ckpt.render((0.0, 0.0, 0.0), 32, 16, 8, 8)
        score = panonerf.psnr(view, pano)
        print("psnr after 6 steps", round(score, 3))
        assert math.isfinite(score)

        pano.save(os.path.join(tmp, "a.png"), os.path.join(tmp, "a.pfm"))
        back = panonerf.Panorama.load(os.path.join(tmp, "a.png"), os.path.join(tmp, "a.pfm"))
        assert back.depth() == pano.depth()

    try:
        panonerf.Checkpoint.load("/nonexistent.ckpt")
        raise AssertionError("missing file accepted")
    except OSError:
        pass
    print("smoke test passed")


if __name__ == "__main__":
    main()
