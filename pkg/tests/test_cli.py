import json

import pytest

from ovsam.cli import EXIT_CONFIG, EXIT_OK, main
from ovsam.ops import seed_all


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--definitely-not-a-flag", "gen-data"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_config_file_exit_2(tmp_path, capsys):
    rc = main(["--config", str(tmp_path / "nope.json"), "gen-data"])
    assert rc == EXIT_CONFIG
    assert "nope.json" in capsys.readouterr().err


def test_bad_config_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"nonsense": 1}}))
    rc = main(["--config", str(cfg), "gen-data"])
    assert rc == EXIT_CONFIG


def test_gen_data_tiny_run(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        json.dumps(
            {"data_root": str(tmp_path / "data"), "out_dir": str(tmp_path / "out"),
             "data_scale": 0.002, "seed": 1}
        )
    )
    rc = main(["--config", str(cfg), "gen-data"])
    assert rc == EXIT_OK
    assert (tmp_path / "data" / "eval" / "manifest.json").exists()
    assert "built 5 splits" in capsys.readouterr().out


def test_infer_requires_checkpoint(tmp_path, capsys):
    img = tmp_path / "x.png"
    img.write_bytes(b"")
    rc = main(["infer", "--image", str(img), "--point", "4,6"])
    assert rc == EXIT_CONFIG


def test_infer_runs_end_to_end(tmp_path, capsys):
    from ovsam.decoder import PromptableDecoder
    from ovsam.mini_clip import ClipConfig, MiniClip, build_vocabulary
    from ovsam.model import assemble
    from ovsam.sam2clip import Sam2ClipAdapter
    from ovsam.synthdata import default_class_split, generate_scene, save_scene_png

    seed_all(6)
    clip = MiniClip(ClipConfig(seed=6))
    clip.eval()
    bundle = assemble(
        clip, build_vocabulary(clip, default_class_split()),
        Sam2ClipAdapter(), PromptableDecoder(),
    )
    ckpt = tmp_path / "model.arch"
    bundle.save(ckpt)
    scene = generate_scene(3, range(24))
    img_path = tmp_path / "scene.png"
    save_scene_png(scene, img_path)

    rc = main(
        [
            "infer", "--image", str(img_path), "--point", "64,64",
            "--checkpoint", str(ckpt), "--mask-out", str(tmp_path / "m.png"),
        ]
    )
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "prompt 0:" in out and "iou confidence" in out
    assert (tmp_path / "m.png").exists()
