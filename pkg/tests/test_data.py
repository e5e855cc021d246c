"""Dataset ingestion, combination presets, manifests, and preprocessing."""

from __future__ import annotations

import json

import numpy as np
import pytest

import reference as ref
from conftest import write_constant_png, write_png, write_random_png
from melad import (
    DataError,
    DatasetManifest,
    SampleRecord,
    bilinear_resize,
    combination_presets,
    combine,
    dataset_codes,
    ingest_csv,
    ingest_folders,
    load_manifest,
    map_label,
    parse_combo,
    preprocess,
    save_manifest,
)


def write_csv(path, rows, header="image,label"):
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")


class TestIngestCsv:
    def test_three_row_counts(self, tmp_path):
        csv_path = tmp_path / "truth.csv"
        write_csv(csv_path, ["a.jpg,benign", "b.jpg,benign",
                             "c.jpg,malignant"])
        result = ingest_csv(csv_path)
        assert result.manifest.counts == {"benign": 2, "malignant": 1}
        assert result.rejects == ()

    def test_empty_body_rejects(self, tmp_path):
        csv_path = tmp_path / "empty.csv"
        write_csv(csv_path, [])
        with pytest.raises(DataError, match="zero valid rows"):
            ingest_csv(csv_path)

    def test_custom_alias_table(self, tmp_path):
        csv_path = tmp_path / "isic.csv"
        write_csv(csv_path, ["x.jpg,MEL", "y.jpg,NV"])
        aliases = {"MEL": "malignant", "NV": "benign"}
        result = ingest_csv(csv_path, aliases=aliases)
        labels = {r.image_path: r.label for r in result.manifest.records}
        assert labels["x.jpg"] == "malignant"
        assert labels["y.jpg"] == "benign"

    def test_default_aliases(self):
        assert map_label("Benign") == "benign"
        assert map_label("0") == "benign"
        assert map_label("nevus") == "benign"
        assert map_label("MALIGNANT") == "malignant"
        assert map_label("1") == "malignant"
        assert map_label("melanoma") == "malignant"
        assert map_label("unknowable") is None

    def test_unmappable_labels_become_rejects(self, tmp_path):
        csv_path = tmp_path / "mixed.csv"
        write_csv(csv_path, ["a.jpg,benign", "b.jpg,suspicious",
                             "c.jpg,malignant"])
        result = ingest_csv(csv_path)
        assert len(result.manifest.records) + len(result.rejects) == 3
        assert result.rejects[0].raw_label == "suspicious"

    def test_missing_file_rejects(self, tmp_path):
        with pytest.raises(DataError):
            ingest_csv(tmp_path / "nope.csv")

    def test_missing_columns_reject(self, tmp_path):
        csv_path = tmp_path / "odd.csv"
        write_csv(csv_path, ["a.jpg,benign"], header="picture,verdict")
        with pytest.raises(DataError, match="column"):
            ingest_csv(csv_path)

    def test_custom_column_names(self, tmp_path):
        csv_path = tmp_path / "odd.csv"
        write_csv(csv_path, ["a.jpg,benign"], header="picture,verdict")
        result = ingest_csv(csv_path, image_column="picture",
                            label_column="verdict")
        assert result.manifest.counts == {"benign": 1, "malignant": 0}

    def test_image_root_prefixes_paths(self, tmp_path):
        csv_path = tmp_path / "truth.csv"
        write_csv(csv_path, ["sub/a.jpg,benign"])
        result = ingest_csv(csv_path, image_root=tmp_path / "imgs")
        record = result.manifest.records[0]
        assert record.image_path.endswith("imgs/sub/a.jpg")

    def test_duplicate_rows_rejected_not_dropped(self, tmp_path):
        csv_path = tmp_path / "dups.csv"
        write_csv(csv_path, ["a.jpg,benign", "a.jpg,malignant"])
        result = ingest_csv(csv_path)
        assert len(result.manifest.records) == 1
        assert len(result.rejects) == 1


class TestIngestFolders:
    def make_tree(self, root, benign=2, malignant=3):
        rng = np.random.default_rng(0)
        (root / "benign").mkdir(parents=True)
        (root / "malignant").mkdir()
        for i in range(benign):
            write_random_png(root / "benign" / f"b{i}.png", rng, size=4)
        for i in range(malignant):
            write_random_png(root / "malignant" / f"m{i}.jpg", rng, size=4)

    def test_counts_by_directory(self, tmp_path):
        self.make_tree(tmp_path)
        manifest = ingest_folders(tmp_path)
        assert manifest.counts == {"benign": 2, "malignant": 3}

    def test_case_insensitive_directories(self, tmp_path):
        rng = np.random.default_rng(0)
        (tmp_path / "Benign").mkdir()
        (tmp_path / "MALIGNANT").mkdir()
        write_random_png(tmp_path / "Benign" / "a.png", rng, size=4)
        write_random_png(tmp_path / "MALIGNANT" / "b.png", rng, size=4)
        manifest = ingest_folders(tmp_path)
        assert manifest.counts == {"benign": 1, "malignant": 1}

    def test_unrelated_directory_ignored_with_warning(self, tmp_path, caplog):
        self.make_tree(tmp_path)
        (tmp_path / "notes").mkdir()
        with caplog.at_level("WARNING"):
            manifest = ingest_folders(tmp_path)
        assert manifest.counts == {"benign": 2, "malignant": 3}
        assert any("notes" in message for message in caplog.messages)

    def test_empty_class_is_valid_with_warning(self, tmp_path, caplog):
        self.make_tree(tmp_path, benign=0, malignant=2)
        with caplog.at_level("WARNING"):
            manifest = ingest_folders(tmp_path)
        assert manifest.counts == {"benign": 0, "malignant": 2}
        assert any("benign" in m for m in caplog.messages)

    def test_no_class_directories_reject(self, tmp_path):
        (tmp_path / "stuff").mkdir()
        with pytest.raises(DataError):
            ingest_folders(tmp_path)

    def test_no_images_reject(self, tmp_path):
        (tmp_path / "benign").mkdir()
        (tmp_path / "malignant").mkdir()
        with pytest.raises(DataError):
            ingest_folders(tmp_path)


class TestManifest:
    def test_duplicate_path_source_rejects(self):
        record = SampleRecord("a.jpg", "benign", "a")
        with pytest.raises(DataError):
            DatasetManifest((record, record))

    def test_counts_and_provenance(self):
        manifest = DatasetManifest((
            SampleRecord("a.jpg", "benign", "a"),
            SampleRecord("b.jpg", "malignant", "b"),
            SampleRecord("c.jpg", "benign", "a"),
        ))
        assert manifest.counts == {"benign": 2, "malignant": 1}
        assert manifest.provenance == ("a", "b")

    def test_round_trip(self, tmp_path):
        manifest = DatasetManifest((
            SampleRecord("a.jpg", "benign", "a"),
            SampleRecord("b.jpg", "malignant", "b"),
        ))
        path = tmp_path / "manifest.csv"
        save_manifest(manifest, path)
        assert load_manifest(path) == manifest
        text = path.read_text(encoding="utf-8")
        assert text.splitlines()[0] == "image_path,label,source"
        assert "\r" not in text

    def test_round_trip_with_oversampled_duplicates(self, tmp_path):
        manifest = DatasetManifest((
            SampleRecord("a.jpg", "benign", "a"),
            SampleRecord("b.jpg", "malignant", "a"),
            SampleRecord("b.jpg", "malignant", "a", augment_seed=1),
            SampleRecord("b.jpg", "malignant", "a", augment_seed=2),
        ))
        path = tmp_path / "balanced.csv"
        save_manifest(manifest, path)
        assert load_manifest(path) == manifest

    def test_bad_header_rejects(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("路径,label,source\n", encoding="utf-8")
        with pytest.raises(DataError):
            load_manifest(path)


class TestCombine:
    def make_named(self, n_a=10, n_b=5):
        a = DatasetManifest(tuple(
            SampleRecord(f"a{i}.jpg", "benign" if i % 2 else "malignant",
                         "local") for i in range(n_a)))
        b = DatasetManifest(tuple(
            SampleRecord(f"b{i}.jpg", "benign", "local")
            for i in range(n_b)))
        return {"a": a, "b": b}

    def test_concatenation_and_provenance(self):
        manifests = self.make_named()
        combined = combine(manifests, ("a", "b"))
        assert len(combined) == 15
        assert combined.provenance == ("a", "b")

    def test_label_preservation(self):
        manifests = self.make_named()
        combined = combine(manifests, ("a", "b"))
        expected = {"benign": 0, "malignant": 0}
        for manifest in manifests.values():
            for label, count in manifest.counts.items():
                expected[label] += count
        assert combined.counts == expected

    def test_unknown_code_rejects(self):
        with pytest.raises(DataError, match="z"):
            combine(self.make_named(), ("a", "z"))

    def test_table_presets_resolve(self):
        presets = combination_presets()
        assert presets["a+b+c+d+e+g"] == ("a", "b", "c", "d", "e", "g")
        codes = dataset_codes()
        for name, combo in presets.items():
            assert parse_combo(name) == combo
            for code in combo:
                assert code in codes

    def test_all_known_codes_have_names(self):
        codes = dataset_codes()
        assert len(codes) == 11
        assert codes["g"] == "PH2"
        assert codes["k"] == "HAM10000"


class TestBilinearResize:
    def test_identity_when_same_size(self, rng):
        image = rng.uniform(0, 1, (5, 7, 3))
        out = bilinear_resize(image, 5, 7)
        np.testing.assert_allclose(out, image, atol=1e-12)

    def test_constant_field_stays_constant(self):
        image = np.full((3, 3, 3), 0.25)
        out = bilinear_resize(image, 7, 11)
        np.testing.assert_allclose(out, 0.25, atol=1e-12)

    def test_checkerboard_hand_values(self):
        # 2x2 checkerboard upscaled to 4x4; hand bilinear with half-pixel
        # centers: source coords (-0.25, 0.25, 0.75, 1.25) clipped to [0, 1].
        image = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 2, 1)
        out = bilinear_resize(image, 4, 4)[:, :, 0]
        expected_row0 = [1.0, 0.75, 0.25, 0.0]
        np.testing.assert_allclose(out[0], expected_row0, atol=1e-6)
        assert abs(out[1, 1] - 0.625) <= 1e-6  # 0.75*0.75 + 0.25*0.25
        # symmetry of the pattern
        np.testing.assert_allclose(out, out[::-1, ::-1], atol=1e-12)

    def test_matches_scalar_oracle(self, rng):
        for _ in range(5):
            src_h, src_w = rng.integers(1, 9, size=2)
            dst_h, dst_w = rng.integers(1, 13, size=2)
            image = rng.uniform(0, 1, (src_h, src_w, 3))
            got = bilinear_resize(image, dst_h, dst_w)
            want = ref.bilinear_resize(image, dst_h, dst_w)
            assert np.abs(got - want).max() <= 1e-6


class TestPreprocess:
    def test_already_sized_image_is_scaled_only(self, tmp_path, rng):
        pixels = rng.integers(0, 256, (150, 150, 3), dtype=np.uint8)
        path = tmp_path / "*sized.png"
        path = tmp_path / "sized.png"
        write_png(path, pixels)
        tensor = preprocess(path)
        assert tensor.dims == (3, 150, 150)
        want = (pixels.astype(np.float64) / 255.0).transpose(2, 0, 1)
        np.testing.assert_allclose(tensor.data, want, atol=1e-7)

    def test_uniform_midgray_any_size(self, tmp_path):
        path = tmp_path / "gray.png"
        write_constant_png(path, 128, size=300)
        tensor = preprocess(path)
        np.testing.assert_allclose(tensor.data, 128.0 / 255.0, atol=1e-7)

    def test_grayscale_replicated_to_three_channels(self, tmp_path, rng):
        from PIL import Image

        pixels = rng.integers(0, 256, (40, 40), dtype=np.uint8)
        path = tmp_path / "gray8.png"
        Image.fromarray(pixels, mode="L").save(path)
        tensor = preprocess(path, target_size=32)
        assert tensor.dims == (3, 32, 32)
        np.testing.assert_array_equal(tensor.data[0], tensor.data[1])
        np.testing.assert_array_equal(tensor.data[0], tensor.data[2])

    def test_values_in_unit_range(self, tmp_path, rng):
        path = tmp_path / "extreme.png"
        pixels = np.zeros((9, 9, 3), dtype=np.uint8)
        pixels[::2] = 255
        write_png(path, pixels)
        tensor = preprocess(path, target_size=15)
        assert tensor.data.min() >= 0.0
        assert tensor.data.max() <= 1.0

    def test_unreadable_file_names_path(self, tmp_path):
        path = tmp_path / "not-an-image.png"
        path.write_text("hello", encoding="utf-8")
        with pytest.raises(DataError, match="not-an-image"):
            preprocess(path)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(DataError, match="ghost"):
            preprocess(tmp_path / "ghost.png")


class TestConfigsShipped:
    def test_alias_table_is_valid_json(self):
        from importlib import resources

        text = (resources.files("melad") / "configs"
                / "label-aliases.json").read_text(encoding="utf-8")
        table = json.loads(text)
        assert set(table.values()) <= {"benign", "malignant"}
