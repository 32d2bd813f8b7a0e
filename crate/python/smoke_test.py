"""Quick end-to-end check of the Python bindings."""

import math
import tempfile
from pathlib import Path

import gst_py


def main():
    model = gst_py.BodyModel.synthetic(vertices=800, shape_dim=4, seed=3)
    verts, joints = model.forward()
    assert len(verts) == 800 and len(joints) == model.num_joints == 24

    scene = gst_py.Scene.generate(model, pose_seed=1, appearance_seed=2, views=4, size=32)
    assert scene.num_views == 4 and scene.resolution == (32, 32)
    gt = scene.ground_truth()

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        model.save(str(root / "body_model.gstb"))
        scene.save(str(root))
        scene, model = gst_py.Scene.load(str(root))
        gt.save(str(root / "params.json"))
        gt = gst_py.Params.load(str(root / "params.json"))

    rgb, alpha = gst_py.render(model, gt, scene, 0)
    assert len(rgb) == 32 * 32 * 3 and len(alpha) == 32 * 32
    assert max(abs(a - b) for a, b in zip(rgb, scene.image(0))) < 1.0 / 255 + 1e-9

    report = gst_py.evaluate(scene, model, gt)
    print("ground truth:", {k: report["summary"][k] for k in ("psnr", "mpjpe_mm") if k in report["summary"]})

    fitted, summary = gst_py.fit(scene, model, init="perturbed:10", steps=30, seed=0)
    assert fitted.num_gaussians == gt.num_gaussians
    assert summary["best_total"] <= summary["trace"][0]["report"]["total"]
    print("fit: best step", summary["best_step"], "total", summary["best_total"])

    checks = gst_py.gradcheck("scaffold", seed=0, seeds=1)
    assert checks and all(c["pass"] for c in checks)

    queries, rows = gst_py.token_counts(5, 4)
    assert queries == 5 * 5 + 1, queries
    print("token counts:", queries, rows)
    try:
        gst_py.Params.load("/nonexistent/params.json")
    except OSError:
        pass
    else:
        raise AssertionError("missing file must raise")
    assert math.isfinite(summary["best_total"])
    print("smoke test passed")


if __name__ == "__main__":
    main()
