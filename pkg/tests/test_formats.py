import numpy as np
import pytest

from nanofusion import formats, models, quant
from nanofusion.dataset import FormatError, generate_raw


@pytest.fixture(scope="module")
def renders():
    return generate_raw(9, 64)


def perturbed(tag, seed=0):
    """A model whose parameters differ from a fresh build with the same seed."""
    m = models.build(tag, seed=seed, head_dropout=0.3)
    rng = np.random.default_rng(seed)
    for member in ([m.camera, m.depth] if isinstance(m, models.AverageEnsemble) else [m]):
        for k, v in member.params.items():
            member.params[k] = (v + rng.normal(0, 0.01, v.shape)).astype(v.dtype)
    return m


def member_params(m):
    if isinstance(m, models.AverageEnsemble):
        return {**{"camera/" + k: v for k, v in m.camera.params.items()},
                **{"depth/" + k: v for k, v in m.depth.params.items()}}
    return m.params


class TestFloatModel:
    @pytest.mark.parametrize("tag", models.VARIANT_TAGS)
    def test_round_trip(self, tag, tmp_path):
        m = perturbed(tag)
        path = tmp_path / f"{tag}.nff"
        formats.save_float_model(m, path)
        assert path.read_bytes()[:4] == b"NFF1"
        back = formats.load_float_model(path)
        assert back.tag == tag
        a, b = member_params(m), member_params(back)
        assert a.keys() == b.keys()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert formats.float_model_bytes(back) == path.read_bytes()

    def test_head_dropout_survives(self, tmp_path):
        path = tmp_path / "m.nff"
        formats.save_float_model(perturbed("cam"), path)
        head = [layer for layer in formats.load_float_model(path).layers()
                if layer.kind == "dropout"]
        assert head and head[0].rate == pytest.approx(0.3)

    def test_wrong_magic(self, tmp_path, renders):
        path = tmp_path / "m.nff"
        q = quant.quantize_model(models.build("cam"), renders.images, renders.depths)
        formats.save_quant_model(q, path)
        with pytest.raises(FormatError):
            formats.load_float_model(path)

    def test_truncated_and_trailing(self, tmp_path):
        raw = formats.float_model_bytes(models.build("depth-late"))
        path = tmp_path / "m.nff"
        path.write_bytes(raw[:-3])
        with pytest.raises(FormatError, match="truncated"):
            formats.load_float_model(path)
        path.write_bytes(raw + b"\0")
        with pytest.raises(FormatError, match="trailing"):
            formats.load_float_model(path)

    def test_unknown_tag(self, tmp_path):
        raw = formats.float_model_bytes(models.build("cam"))
        path = tmp_path / "m.nff"
        path.write_bytes(raw[:4] + b"\x03\x00abc" + raw[4 + 2 + 3:])
        with pytest.raises(FormatError):
            formats.load_float_model(path)


class TestQuantModel:
    @pytest.mark.parametrize("tag", ["cam", "mid-fusion", "late-fusion", "avg-late"])
    def test_round_trip(self, tag, tmp_path, renders):
        q = quant.quantize_model(models.build(tag, seed=1), renders.images, renders.depths)
        path = tmp_path / f"{tag}.nfq"
        formats.save_quant_model(q, path)
        assert formats.read_magic(path) == b"NFQ1"
        back = formats.load_quant_model(path)
        assert formats.quant_model_bytes(back) == path.read_bytes()
        a = q.predict(renders.images[:5], renders.depths[:5])
        b = back.predict(renders.images[:5], renders.depths[:5])
        assert a.tobytes() == b.tobytes()

    def test_payload_types(self, tmp_path, renders):
        q = quant.quantize_model(models.build("mid-fusion"), renders.images, renders.depths)
        formats.save_quant_model(q, tmp_path / "m.nfq")
        back = formats.load_quant_model(tmp_path / "m.nfq")
        for op in back.ops:
            if op.weight is not None:
                assert op.weight.dtype == np.int8 and op.bias.dtype == np.int32

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "m.nfq"
        formats.save_float_model(models.build("cam"), path)
        with pytest.raises(FormatError):
            formats.load_quant_model(path)
