import struct

import numpy as np
import pytest

from spflow import io as sio
from spflow.errors import DataError
from spflow.optim import ParameterStore
from spflow.synthetic import SyntheticConfig, generate_scene


def f32_cloud(rng, n):
    return rng.uniform(-5, 5, size=(n, 3)).astype(np.float32).astype(np.float64)


# -- flat binary ----------------------------------------------------------------


def test_bin_layout_is_f32_triples(tmp_path):
    path = tmp_path / "cloud.bin"
    path.write_bytes(struct.pack("<6f", 0, 0, 0, 1, 2, 3))
    cloud = sio.load_cloud(path)
    assert np.array_equal(cloud, [[0, 0, 0], [1, 2, 3]])


def test_bin_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    cloud = f32_cloud(rng, 17)
    path = tmp_path / "c.bin"
    sio.save_cloud(path, cloud)
    again = sio.load_cloud(path)
    assert np.array_equal(cloud, again)
    sio.save_cloud(tmp_path / "c2.bin", again)
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "c2.bin").read_bytes()


def test_bin_rejects_truncated(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 10)
    with pytest.raises(DataError):
        sio.load_cloud(path)


def test_bin_rejects_non_finite(tmp_path):
    path = tmp_path / "nan.bin"
    path.write_bytes(struct.pack("<3f", np.nan, 0, 0))
    with pytest.raises(DataError):
        sio.load_cloud(path)


def test_flow_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    flow = f32_cloud(rng, 9)
    sio.save_flow(tmp_path / "f.bin", flow)
    assert np.array_equal(sio.load_flow(tmp_path / "f.bin"), flow)


def test_labels_roundtrip(tmp_path):
    labels = np.array([0, 0, 1, 2, 1])
    sio.save_labels(tmp_path / "l.bin", labels)
    assert np.array_equal(sio.load_labels(tmp_path / "l.bin"), labels)


# -- ascii ply --------------------------------------------------------------------


def test_ply_minimal_single_vertex(tmp_path):
    path = tmp_path / "one.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
        "0.5 -1.25 3\n"
    )
    assert np.array_equal(sio.load_cloud(path), [[0.5, -1.25, 3.0]])


def test_ply_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    cloud = f32_cloud(rng, 23)
    path = tmp_path / "c.ply"
    sio.save_cloud(path, cloud)
    assert np.array_equal(sio.load_cloud(path), cloud)


def test_ply_handles_extra_properties_and_comments(tmp_path):
    path = tmp_path / "extra.ply"
    path.write_text(
        "ply\ncomment made by hand\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
        "0 0 0 255 0 0\n1 1 1 0 255 0\n"
    )
    assert np.array_equal(sio.load_cloud(path), [[0, 0, 0], [1, 1, 1]])


@pytest.mark.parametrize(
    "text",
    [
        "noply\nformat ascii 1.0\nend_header\n",
        "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n",
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n",
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float a\nproperty float b\nend_header\n0 0\n",
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 zero 0\n",
    ],
    ids=["magic", "binary-format", "truncated", "no-xyz", "non-numeric"],
)
def test_ply_rejects_malformed(tmp_path, text):
    path = tmp_path / "bad.ply"
    path.write_text(text)
    with pytest.raises(DataError):
        sio.load_cloud(path)


def test_superpoint_export_colors_from_palette(tmp_path):
    rng = np.random.default_rng(3)
    cloud = f32_cloud(rng, 6)
    path = tmp_path / "sp.ply"
    sio.export_superpoints_ply(path, cloud, np.array([0, 1, 2, 0, 1, 40]))
    lines = path.read_text().splitlines()
    assert "property uchar red" in lines
    body = lines[lines.index("end_header") + 1 :]
    assert [int(v) for v in body[0].split()[3:]] == list(sio.PALETTE[0])
    # index 40 wraps at the 32-color palette
    assert [int(v) for v in body[5].split()[3:]] == list(sio.PALETTE[8])
    assert np.array_equal(sio.load_cloud(path), cloud)


# -- checkpoints -------------------------------------------------------------------


def make_store(rng):
    store = ParameterStore()
    store.add("enc.w", rng.normal(size=(4, 3)))
    store.add("enc.b", rng.normal(size=3))
    store.add("head.w", rng.normal(size=(3, 2)))
    return store


def test_checkpoint_roundtrip_bitwise(tmp_path):
    store = make_store(np.random.default_rng(4))
    path = tmp_path / "model.spfw"
    sio.save_checkpoint(store, path)
    again = sio.load_checkpoint(path)
    assert sorted(again.names()) == sorted(store.names())
    for name, t in store.items():
        assert np.array_equal(again[name].data, t.data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.spfw"
    store = make_store(np.random.default_rng(5))
    sio.save_checkpoint(store, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="magic"):
        sio.load_checkpoint(path)


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "v9.spfw"
    store = make_store(np.random.default_rng(6))
    sio.save_checkpoint(store, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="version"):
        sio.load_checkpoint(path)


def test_checkpoint_schema_reports_missing_tensor(tmp_path):
    store = make_store(np.random.default_rng(7))
    path = tmp_path / "m.spfw"
    sio.save_checkpoint(store, path)
    schema = store.schema()
    schema["extra.w"] = (2, 2)
    with pytest.raises(DataError, match="extra.w"):
        sio.load_checkpoint(path, schema=schema)


def test_checkpoint_schema_rejects_shape_mismatch(tmp_path):
    store = make_store(np.random.default_rng(8))
    path = tmp_path / "m.spfw"
    sio.save_checkpoint(store, path)
    schema = store.schema()
    schema["enc.w"] = (9, 9)
    with pytest.raises(DataError, match="enc.w"):
        sio.load_checkpoint(path, schema=schema)


def test_checkpoint_rejects_truncation(tmp_path):
    store = make_store(np.random.default_rng(9))
    path = tmp_path / "m.spfw"
    sio.save_checkpoint(store, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 7])
    with pytest.raises(DataError):
        sio.load_checkpoint(path)


# -- synthetic scenes ------------------------------------------------------------


def test_scene_pure_translation_flow():
    cfg = SyntheticConfig(parts=1, points_per_part=32, rotation_range=0.0,
                          translation_range=1.0, noise_sigma=0.0, seed=5)
    scene = generate_scene(cfg)
    # one rigid translation: flow constant, target = source + flow
    assert np.allclose(scene.gt_flow, scene.gt_flow[0], atol=1e-12)
    assert np.allclose(scene.target, scene.source + scene.gt_flow, atol=1e-12)


def test_scene_zero_motion_zero_noise():
    cfg = SyntheticConfig(parts=2, points_per_part=16, rotation_range=0.0,
                          translation_range=0.0, noise_sigma=0.0, seed=6)
    scene = generate_scene(cfg)
    assert np.array_equal(scene.gt_flow, np.zeros_like(scene.gt_flow))
    assert np.array_equal(scene.target, scene.source)


def test_scene_deterministic_per_seed():
    cfg = SyntheticConfig(seed=7)
    a = generate_scene(cfg)
    b = generate_scene(SyntheticConfig(seed=7))
    assert np.array_equal(a.source, b.source)
    assert np.array_equal(a.target, b.target)
    assert np.array_equal(a.gt_flow, b.gt_flow)
    c = generate_scene(SyntheticConfig(seed=8))
    assert not np.array_equal(a.source, c.source)


def test_scene_labels_cover_parts():
    scene = generate_scene(SyntheticConfig(parts=3, points_per_part=10, seed=9))
    assert sorted(set(scene.part_labels.tolist())) == [0, 1, 2]
    assert len(scene.source) == 30


def test_scene_rotation_preserves_part_shape():
    cfg = SyntheticConfig(parts=1, points_per_part=24, rotation_range=0.3,
                          translation_range=0.2, noise_sigma=0.0, seed=10)
    scene = generate_scene(cfg)
    moved = scene.source + scene.gt_flow
    d_src = np.linalg.norm(scene.source[0] - scene.source[1:], axis=1)
    d_mov = np.linalg.norm(moved[0] - moved[1:], axis=1)
    assert np.allclose(d_src, d_mov, atol=1e-9)


def test_scene_directory_roundtrip(tmp_path):
    scene = generate_scene(SyntheticConfig(parts=2, points_per_part=8, seed=11))
    # bin storage is float32, so round the reference down to f32 first
    sio.save_scene(tmp_path / "scene_0000", scene, meta={"index": 0})
    dirs = sio.list_scene_dirs(tmp_path)
    assert len(dirs) == 1
    loaded = sio.load_cloud(dirs[0] / "source.bin")
    assert np.array_equal(loaded, scene.source.astype(np.float32).astype(np.float64))
    assert (dirs[0] / "meta.json").exists()
    assert np.array_equal(sio.load_labels(dirs[0] / "labels.bin"), scene.part_labels)


def test_list_scene_dirs_rejects_empty(tmp_path):
    with pytest.raises(DataError):
        sio.list_scene_dirs(tmp_path)


def test_noise_free_scene_is_self_consistent():
    from spflow.losses import chamfer_loss
    from spflow.metrics import evaluate

    scene = generate_scene(SyntheticConfig(parts=2, points_per_part=24,
                                           noise_sigma=0.0, seed=12))
    report = evaluate(scene.gt_flow, scene.gt_flow)
    assert report.epe == 0.0 and report.as_pct == 100.0
    assert chamfer_loss(scene.source + scene.gt_flow, scene.target).item() < 1e-9
