import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from znet.mhd import MetaImageError, load_mhd, parse_header, save_mhd
from znet.volume import GeometryError, Volume


def _write(tmp_path, header, payload, name="img"):
    (tmp_path / f"{name}.raw").write_bytes(payload)
    p = tmp_path / f"{name}.mhd"
    p.write_text(header.replace("RAW", f"{name}.raw"))
    return p


HDR = """ObjectType = Image
NDims = 3
DimSize = {x} {y} {z}
ElementSpacing = {sx} {sy} {sz}
ElementType = {t}
{order}
ElementDataFile = RAW
"""


def test_validation_header_geometry(tmp_path):
    hdr = HDR.format(x=512, y=512, z=42, sx=0.27, sy=0.27, sz=2.20, t="MET_UCHAR", order="")
    p = _write(tmp_path, hdr, bytes(42 * 512 * 512))
    v = load_mhd(p)
    assert v.shape == (42, 512, 512) and v.spacing == (2.2, 0.27, 0.27)


def test_met_short_little_endian(tmp_path):
    data = np.arange(-12, 12, dtype="<i2").reshape(2, 3, 4)
    hdr = HDR.format(x=4, y=3, z=2, sx=1, sy=1, sz=2, t="MET_SHORT", order="BinaryDataByteOrderMSB = False")
    v = load_mhd(_write(tmp_path, hdr, data.tobytes()))
    np.testing.assert_array_equal(v.data, data)
    assert v.kind == "intensity"


def test_big_endian_and_element_size(tmp_path):
    data = np.arange(24, dtype=">u2").reshape(2, 3, 4)
    hdr = HDR.format(x=4, y=3, z=2, sx=1, sy=1, sz=2, t="MET_USHORT", order="ElementByteOrderMSB = True")
    hdr = hdr.replace("ElementSpacing", "ElementSize")
    v = load_mhd(_write(tmp_path, hdr, data.tobytes()))
    np.testing.assert_array_equal(v.data, data.astype(np.float32))


def test_size_mismatch(tmp_path):
    hdr = HDR.format(x=4, y=3, z=2, sx=1, sy=1, sz=1, t="MET_SHORT", order="")
    with pytest.raises(MetaImageError, match="48 bytes, payload has 47"):
        load_mhd(_write(tmp_path, hdr, bytes(47)))


@pytest.mark.parametrize("edit,key", [
    (("MET_SHORT", "MET_DOUBLE"), "ElementType"),
    (("NDims = 3", "NDims = 2"), "NDims"),
    (("DimSize = 4 3 2", "DimSize = 4 3"), "DimSize"),
])
def test_header_errors_name_key(tmp_path, edit, key):
    hdr = HDR.format(x=4, y=3, z=2, sx=1, sy=1, sz=1, t="MET_SHORT", order="").replace(*edit)
    with pytest.raises(MetaImageError, match=key):
        load_mhd(_write(tmp_path, hdr, bytes(48)))


def test_parse_header_malformed():
    assert parse_header("# c\nA = 1 2\n") == {"A": "1 2"}
    with pytest.raises(MetaImageError):
        parse_header("no equals sign")


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 7), st.integers(1, 7), st.floats(0.05, 9.0), st.integers(0, 99),
       st.booleans())
def test_write_read_identity(tmp_path_factory, d, h, w, s, seed, is_mask):
    tmp = tmp_path_factory.mktemp("rt")
    rng = np.random.default_rng(seed)
    if is_mask:
        v = Volume((rng.random((d, h, w)) < 0.5).astype(np.uint8), (s, s / 3, 0.7), "mask")
    else:
        v = Volume(rng.standard_normal((d, h, w)).astype(np.float32), (s, s / 3, 0.7))
    back = load_mhd(save_mhd(tmp / "v.mhd", v), kind=v.kind)
    assert back.shape == v.shape and back.spacing == v.spacing and back.kind == v.kind
    assert back.data.tobytes() == v.data.tobytes()


def test_mask_written_as_uchar(tmp_path):
    save_mhd(tmp_path / "m.mhd", Volume(np.ones((1, 2, 2), np.uint8), (1, 1, 1), "mask"))
    assert "ElementType = MET_UCHAR" in (tmp_path / "m.mhd").read_text()


def test_volume_invariants():
    with pytest.raises(GeometryError):
        Volume(np.zeros((2, 2)), (1, 1, 1))
    with pytest.raises(GeometryError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), 2), (1, 1, 1), "mask")
