import json

import numpy as np
import pytest
from PIL import Image

from clip_export.cli import main
from clip_export.encoders import ToyColorEncoder, get_encoder
from clip_export.export import (ExportError, ExportJob, export,
                                read_image_manifest, read_prompt_manifest)
from rplkg.baselines import zeroshot_scores
from rplkg.embedstore import read_cache
from rplkg.selector import PromptBlock

COLORS = {"red": (200, 30, 30), "blue": (30, 30, 200), "green": (30, 180, 30)}


@pytest.fixture()
def tiny_folder(tmp_path):
    """Three color classes, four noisy solid-color images each."""
    rng = np.random.default_rng(0)
    rows = []
    for class_id, (name, rgb) in enumerate(COLORS.items()):
        for i in range(4):
            arr = np.clip(np.array(rgb) + rng.integers(-25, 25, (16, 16, 3)),
                          0, 255).astype(np.uint8)
            p = tmp_path / f"{name}_{i}.png"
            Image.fromarray(arr).save(p)
            rows.append(f"{p},{class_id}")
    manifest = tmp_path / "images.csv"
    manifest.write_text("path,class_id\n" + "\n".join(rows) + "\n")
    prompts = tmp_path / "prompts.jsonl"
    prompts.write_text("".join(
        json.dumps({"class_id": c, "text": f"a photo of a {name} square."}) + "\n"
        for c, name in enumerate(COLORS)))
    return manifest, prompts


class TestManifests:
    def test_image_manifest_header_skipped(self, tiny_folder):
        manifest, _ = tiny_folder
        paths, labels = read_image_manifest(str(manifest))
        assert len(paths) == 12
        assert labels.tolist() == sorted(labels.tolist())

    def test_prompt_positions_contiguous(self, tmp_path):
        p = tmp_path / "p.jsonl"
        p.write_text("".join(json.dumps({"class_id": c, "text": f"t{c}{j}"}) + "\n"
                             for c in (0, 1) for j in range(3)))
        _, labels, pos = read_prompt_manifest(str(p))
        for c in (0, 1):
            assert pos[labels == c].tolist() == [0, 1, 2]

    def test_empty_text_rejected(self, tmp_path):
        p = tmp_path / "p.jsonl"
        p.write_text(json.dumps({"class_id": 0, "text": ""}) + "\n")
        with pytest.raises(ExportError):
            read_prompt_manifest(str(p))


class TestExport:
    def test_caches_validate_and_round_trip(self, tiny_folder, tmp_path):
        manifest, prompts = tiny_folder
        img_out = tmp_path / "images.rpkg"
        txt_out = tmp_path / "prompts.rpkg"
        export(ExportJob("toy-color", str(manifest), str(img_out), "image"))
        export(ExportJob("toy-color", str(prompts), str(txt_out), "prompt"))
        images = read_cache(str(img_out))  # read_cache validates + checks CRC
        texts = read_cache(str(txt_out))
        assert images.count == 12 and texts.count == 3
        assert images.dim == texts.dim == ToyColorEncoder.dim

    def test_reexport_byte_identical(self, tiny_folder, tmp_path):
        manifest, _ = tiny_folder
        a, b = tmp_path / "a.rpkg", tmp_path / "b.rpkg"
        export(ExportJob("toy-color", str(manifest), str(a), "image"))
        export(ExportJob("toy-color", str(manifest), str(b), "image"))
        assert a.read_bytes() == b.read_bytes()

    def test_zeroshot_beats_chance(self, tiny_folder, tmp_path):
        manifest, prompts = tiny_folder
        img_out = tmp_path / "images.rpkg"
        txt_out = tmp_path / "prompts.rpkg"
        export(ExportJob("toy-color", str(manifest), str(img_out), "image"))
        export(ExportJob("toy-color", str(prompts), str(txt_out), "prompt"))
        images = read_cache(str(img_out))
        block = PromptBlock.from_cache(read_cache(str(txt_out)))
        scores = zeroshot_scores(images.vectors, block)
        acc = float(np.mean(np.argmax(scores, axis=1) == images.labels))
        assert acc > 1.0 / len(COLORS)

    def test_unreadable_image_skipped_with_warning(self, tiny_folder, tmp_path):
        manifest, _ = tiny_folder
        broken = tmp_path / "broken.csv"
        broken.write_text(manifest.read_text() + f"{tmp_path / 'missing.png'},0\n")
        out = tmp_path / "out.rpkg"
        with pytest.warns(UserWarning, match="missing.png"):
            result = export(ExportJob("toy-color", str(broken), str(out), "image"))
        assert result.skipped == 1
        assert read_cache(str(out)).count == 12

    def test_zero_records_is_error(self, tmp_path):
        manifest = tmp_path / "bad.csv"
        manifest.write_text(f"{tmp_path / 'nope.png'},0\n")
        with pytest.warns(UserWarning):
            with pytest.raises(ExportError):
                export(ExportJob("toy-color", str(manifest),
                                 str(tmp_path / "o.rpkg"), "image"))

    def test_unknown_backbone(self, tiny_folder, tmp_path):
        with pytest.raises(ValueError):
            get_encoder("ResNet-50")


class TestCli:
    def test_end_to_end(self, tiny_folder, tmp_path, capsys):
        manifest, _ = tiny_folder
        out = tmp_path / "c.rpkg"
        assert main(["--manifest", str(manifest), "--kind", "image",
                     "--out", str(out)]) == 0
        assert "12 records" in capsys.readouterr().out
        assert read_cache(str(out)).count == 12

    def test_missing_manifest_exit_code(self, tmp_path, capsys):
        code = main(["--manifest", str(tmp_path / "nope.csv"), "--kind", "image",
                     "--out", str(tmp_path / "o.rpkg")])
        assert code == 2
