import json

import numpy as np
import pytest

from conftest import GOLDEN_LAYERS, random_layer, random_set
from src.adapter_io import (
    decode_adapter, encode_adapter, generate_synthetic, load_document, read_adapter, read_manifest,
    save_document, synthetic_layer_names, write_adapter,
)
from src.errors import (
    AdapterFormatError, InputValidationError, ManifestError, MissingTensorError, OverlappingOffsetsError,
    TensorShapeError, TruncatedFileError, UnsupportedDtypeError,
)
from src.lora import AdapterRole, AdapterSet, MaskPair, delta_weight, fold_rank_masks
from src.schemas import MergeConfig, SyntheticSpec


def build(header, payload=b""):
    raw = json.dumps(header).encode("utf-8")
    return len(raw).to_bytes(8, "little") + raw + payload


def f32(count):
    return np.arange(count, dtype="<f4").tobytes()


def as_stored(x):
    return np.asarray(x).astype(np.float32).astype(np.float64)


class TestGoldenFile:
    def test_reads_exact_matrices(self, golden_path):
        adapter = read_adapter(golden_path)
        assert adapter.names() == ["unet.down.0", "unet.up.0"]
        assert adapter.role == AdapterRole.CONTENT
        for name, (a, b) in GOLDEN_LAYERS.items():
            np.testing.assert_array_equal(adapter.layers[name].a, a)
            np.testing.assert_array_equal(adapter.layers[name].b, b)
            assert adapter.layers[name].alpha == 1.0
            assert adapter.layers[name].scale == 0.5

    def test_encoding_is_canonical(self, golden_path, golden_set):
        assert encode_adapter(golden_set) == golden_path.read_bytes()


class TestRoundTrip:
    def test_random_set(self, rng, tmp_path):
        adapter = random_set(rng, ["unet.up_blocks.1.a", "unet.mid_block.b"], rank=4)
        write_adapter(adapter, tmp_path / "x.lora")
        back = read_adapter(tmp_path / "x.lora")
        assert back.names() == sorted(adapter.names())
        for name, layer in adapter.layers.items():
            np.testing.assert_array_equal(back.layers[name].a, as_stored(layer.a))
            np.testing.assert_array_equal(back.layers[name].b, as_stored(layer.b))
            assert back.layers[name].alpha == 4.0

    def test_empty_set(self):
        back = decode_adapter(encode_adapter(AdapterSet(layers={}, role=AdapterRole.STYLE)))
        assert len(back) == 0
        assert back.role == AdapterRole.STYLE

    def test_per_layer_alpha(self, rng):
        adapter = AdapterSet.from_layers([random_layer(rng, "l0", alpha=2.0), random_layer(rng, "l1", alpha=6.0)])
        data = encode_adapter(adapter)
        assert b'"alpha.l0":"2.0"' in data
        assert b"l0.alpha" not in data
        back = decode_adapter(data)
        assert back.layers["l0"].alpha == 2.0
        assert back.layers["l1"].alpha == 6.0

    def test_per_layer_alpha_is_exact_decimal(self, rng):
        adapter = AdapterSet.from_layers([random_layer(rng, "l0", alpha=0.1), random_layer(rng, "l1", alpha=0.3)])
        back = decode_adapter(encode_adapter(adapter))
        assert back.layers["l0"].alpha == 0.1
        assert back.layers["l1"].alpha == 0.3

    def test_alpha_tensor_still_read(self):
        header = {
            "l.alpha": {"dtype": "F32", "shape": [], "data_offsets": [0, 4]},
            "l.lora_A": {"dtype": "F32", "shape": [2, 1], "data_offsets": [4, 12]},
            "l.lora_B": {"dtype": "F32", "shape": [1, 2], "data_offsets": [12, 20]},
        }
        payload = np.array([4.0, 1.0, 2.0, 3.0, 4.0], dtype="<f4").tobytes()
        assert decode_adapter(build(header, payload)).layers["l"].alpha == 4.0

    def test_uniform_alpha_goes_to_metadata(self, rng):
        adapter = AdapterSet.from_layers([random_layer(rng, "l0", alpha=8.0), random_layer(rng, "l1", alpha=8.0)])
        data = encode_adapter(adapter)
        assert b".alpha" not in data
        assert decode_adapter(data).layers["l1"].alpha == 8.0

    def test_mergers_are_stored(self, rng):
        c, s = random_layer(rng, "l0", rank=3), random_layer(rng, "l0", rank=2)
        pair = MaskPair(rng.uniform(size=3), rng.uniform(size=2))
        merged = AdapterSet(layers={"l0": fold_rank_masks(c, s, pair)}, role=AdapterRole.MERGED, masks={"l0": pair})
        back = decode_adapter(encode_adapter(merged))
        assert back.role == AdapterRole.MERGED
        np.testing.assert_array_equal(back.masks["l0"].content, as_stored(pair.content))
        np.testing.assert_array_equal(back.masks["l0"].style, as_stored(pair.style))

    def test_encoding_is_deterministic(self, rng):
        adapter = random_set(rng, ["b", "a", "c"])
        assert encode_adapter(adapter) == encode_adapter(adapter)


class TestMalformedFiles:
    def test_truncated_payload(self, golden_path):
        with pytest.raises(TruncatedFileError):
            decode_adapter(golden_path.read_bytes()[:-4])

    def test_truncated_header(self, golden_path):
        with pytest.raises(TruncatedFileError):
            decode_adapter(golden_path.read_bytes()[:5])
        with pytest.raises(TruncatedFileError):
            decode_adapter(golden_path.read_bytes()[:40])

    def test_overlapping_offsets(self):
        header = {
            "l.lora_A": {"dtype": "F32", "shape": [4, 2], "data_offsets": [0, 32]},
            "l.lora_B": {"dtype": "F32", "shape": [2, 4], "data_offsets": [16, 48]},
        }
        with pytest.raises(OverlappingOffsetsError):
            decode_adapter(build(header, f32(12)))

    def test_uncovered_payload(self):
        header = {"l.lora_A": {"dtype": "F32", "shape": [2, 1], "data_offsets": [0, 8]}}
        with pytest.raises(OverlappingOffsetsError, match="not covered"):
            decode_adapter(build(header, f32(4)))

    def test_unsupported_dtype(self):
        header = {"l.lora_A": {"dtype": "F16", "shape": [2, 2], "data_offsets": [0, 8]}}
        with pytest.raises(UnsupportedDtypeError, match="F16"):
            decode_adapter(build(header, f32(2)))

    def test_shape_does_not_match_bytes(self):
        header = {
            "l.lora_A": {"dtype": "F32", "shape": [4, 3], "data_offsets": [0, 32]},
            "l.lora_B": {"dtype": "F32", "shape": [2, 4], "data_offsets": [32, 64]},
        }
        with pytest.raises(TensorShapeError):
            decode_adapter(build(header, f32(16)))

    def test_rank_mismatch_between_factors(self):
        header = {
            "l.lora_A": {"dtype": "F32", "shape": [4, 2], "data_offsets": [0, 32]},
            "l.lora_B": {"dtype": "F32", "shape": [3, 4], "data_offsets": [32, 80]},
        }
        with pytest.raises(TensorShapeError, match="pair"):
            decode_adapter(build(header, f32(20)))

    def test_missing_b_factor(self):
        header = {"unet.down.0.lora_A": {"dtype": "F32", "shape": [4, 2], "data_offsets": [0, 32]}}
        with pytest.raises(MissingTensorError, match=r"unet\.down\.0\.lora_B missing"):
            decode_adapter(build(header, f32(8)))

    def test_unknown_suffix(self):
        header = {"unet.down.0.weight": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}
        with pytest.raises(AdapterFormatError, match="suffix"):
            decode_adapter(build(header, f32(2)))

    def test_header_not_json(self):
        with pytest.raises(AdapterFormatError, match="JSON"):
            decode_adapter((4).to_bytes(8, "little") + b"{{{{")

    def test_metadata_rank_disagrees(self):
        header = {
            "__metadata__": {"rank": "3"},
            "l.lora_A": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]},
            "l.lora_B": {"dtype": "F32", "shape": [2, 2], "data_offsets": [16, 32]},
        }
        with pytest.raises(TensorShapeError, match="metadata"):
            decode_adapter(build(header, f32(8)))

    def test_boolean_shape(self):
        header = {"l.lora_A": {"dtype": "F32", "shape": [True, 1], "data_offsets": [0, 4]}}
        with pytest.raises(TensorShapeError, match="shape"):
            decode_adapter(build(header, f32(1)))

    def test_boolean_offsets(self):
        header = {"l.lora_A": {"dtype": "F32", "shape": [1, 1], "data_offsets": [False, True]}}
        with pytest.raises(OverlappingOffsetsError):
            decode_adapter(build(header, f32(1)))

    def test_alpha_for_unknown_layer(self):
        header = {
            "__metadata__": {"alpha.ghost": "2.0"},
            "l.lora_A": {"dtype": "F32", "shape": [2, 1], "data_offsets": [0, 8]},
            "l.lora_B": {"dtype": "F32", "shape": [1, 2], "data_offsets": [8, 16]},
        }
        with pytest.raises(AdapterFormatError, match="ghost"):
            decode_adapter(build(header, f32(4)))

    def test_format_errors_are_input_errors(self):
        assert issubclass(TruncatedFileError, InputValidationError)
        assert TruncatedFileError.exit_code == 2


class TestManifest:
    def test_object_and_list_forms(self, tmp_path):
        entries = [{"name": "unet.mid_block.a", "resolution": 16}, {"name": "unet.up_blocks.1.b"}]
        (tmp_path / "obj.json").write_text(json.dumps({"entries": entries}))
        (tmp_path / "list.json").write_text(json.dumps(entries))
        assert read_manifest(tmp_path / "obj.json") == read_manifest(tmp_path / "list.json")

    def test_duplicate_names(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps([{"name": "x"}, {"name": "x"}]))
        with pytest.raises(ManifestError, match="duplicate"):
            read_manifest(tmp_path / "m.json")

    def test_malformed_json_reports_position(self, tmp_path):
        (tmp_path / "m.json").write_text('{\n  "entries": [\n    {"name": }\n')
        with pytest.raises(ManifestError, match="line 3"):
            read_manifest(tmp_path / "m.json")

    def test_bad_override(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps([{"name": "x", "class_override": "texture"}]))
        with pytest.raises(ManifestError):
            read_manifest(tmp_path / "m.json")

    def test_sdxl_fixture(self, sdxl_manifest_path):
        manifest = read_manifest(sdxl_manifest_path)
        assert sum(e.d_out for e in manifest.entries) == 665_600


class TestDocuments:
    def test_config_round_trip(self, tmp_path):
        config = MergeConfig(steps=12, lambda_layer_prior=0.5, seed=9)
        save_document(config, tmp_path / "c.json")
        assert load_document(tmp_path / "c.json", MergeConfig) == config

    def test_unknown_keys_rejected(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"steps": 10, "momentum": 0.9}))
        with pytest.raises(InputValidationError, match="momentum"):
            load_document(tmp_path / "c.json", MergeConfig)

    def test_bad_value_rejected(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"steps": 0}))
        with pytest.raises(InputValidationError):
            load_document(tmp_path / "c.json", MergeConfig)


class TestSynthetic:
    def test_shapes(self):
        adapter = generate_synthetic(SyntheticSpec(layers=3, d_out=640, d_in=640, rank=64), seed=0)
        assert len(adapter) == 3
        for layer in adapter.layers.values():
            assert layer.a.shape == (640, 64)
            assert layer.b.shape == (64, 640)

    def test_spectrum(self):
        spec = SyntheticSpec(layers=2, d_out=6, d_in=5, rank=4, alpha=2.0, spectrum=[4.0, 3.0, 2.0, 1.0])
        for layer in generate_synthetic(spec, seed=3).layers.values():
            sigma = np.linalg.svd(delta_weight(layer), compute_uv=False)
            np.testing.assert_allclose(sigma[:4], [2.0, 1.5, 1.0, 0.5], atol=1e-10)

    def test_deterministic_per_seed(self):
        spec = SyntheticSpec(layers=4, d_out=8, d_in=8, rank=2, role='style')
        first, second = generate_synthetic(spec, 5), generate_synthetic(spec, 5)
        assert encode_adapter(first) == encode_adapter(second)
        assert encode_adapter(first) != encode_adapter(generate_synthetic(spec, 6))
        assert first.role == AdapterRole.STYLE

    def test_explicit_names(self):
        spec = SyntheticSpec(layers=["unet.mid_block.q", "unet.up_blocks.1.k"], d_out=4, d_in=4, rank=2)
        assert generate_synthetic(spec, 0).names() == ["unet.mid_block.q", "unet.up_blocks.1.k"]

    def test_default_names(self):
        names = synthetic_layer_names(7)
        assert names[0] == "unet.down_blocks.1.attentions.0.to_q"
        assert names[6] == "unet.down_blocks.2.attentions.1.to_q"
        assert len(set(names)) == 7

    def test_rank_too_large(self):
        with pytest.raises(ValueError):
            SyntheticSpec(d_out=4, d_in=4, rank=5)
