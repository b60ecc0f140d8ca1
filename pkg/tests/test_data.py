import json

import jsonschema
import numpy as np
import pytest

from witnessreg.data import (
    REPORT_SCHEMA,
    CloudFormatError,
    InstanceSpec,
    RunReport,
    generate_instance,
    load_cloud,
    load_report,
    normalize_to_cube,
    save_cloud,
    save_report,
)
from witnessreg.geom import is_rotation


def test_load_csv(tmp_path):
    f = tmp_path / "a.csv"
    f.write_text("0,0,0\n1,0,0\n")
    X = load_cloud(f)
    assert X.shape == (2, 3) and X[1, 0] == 1.0


def test_load_csv_errors(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("0,0,0\n1,0\n")
    with pytest.raises(CloudFormatError, match="expected 3 fields"):
        load_cloud(f)
    f.write_text("0,nan,0\n")
    with pytest.raises(CloudFormatError):
        load_cloud(f)
    f.write_text("0,x,0\n")
    with pytest.raises(CloudFormatError):
        load_cloud(f)
    f.write_text("")
    with pytest.raises(CloudFormatError):
        load_cloud(f)


PLY = """ply
format ascii 1.0
comment made by hand
element vertex 3
property float x
property float y
property float z
property uchar red
element face 1
property list uchar int vertex_indices
end_header
0 0 0 255
1 0 0 0
0 1 0.5 7
3 0 1 2
"""


def test_load_ply(tmp_path):
    f = tmp_path / "m.ply"
    f.write_text(PLY)
    X = load_cloud(f)
    np.testing.assert_array_equal(X, [[0, 0, 0], [1, 0, 0], [0, 1, 0.5]])


def test_load_ply_errors(tmp_path):
    f = tmp_path / "m.ply"
    f.write_text(PLY.replace("format ascii", "format binary_little_endian"))
    with pytest.raises(CloudFormatError, match="ASCII"):
        load_cloud(f)
    f.write_text(PLY.replace("end_header\n", ""))
    with pytest.raises(CloudFormatError):
        load_cloud(f)
    f.write_text(PLY.replace("element vertex 3", "element vertex 9"))
    with pytest.raises(CloudFormatError):
        load_cloud(f)


@pytest.mark.parametrize("name", ["c.csv", "c.ply"])
def test_save_load_roundtrip(tmp_path, name):
    X = np.random.default_rng(0).standard_normal((20, 3)) * 1e3
    save_cloud(X, tmp_path / name)
    np.testing.assert_array_equal(load_cloud(tmp_path / name), X)


def test_normalize_examples():
    X = np.random.default_rng(1).uniform(0, 2, (50, 3))
    X[0], X[1] = 0.0, 2.0
    Y = normalize_to_cube(X)
    np.testing.assert_allclose(Y.min(axis=0), -0.5)
    np.testing.assert_allclose(Y.max(axis=0), 0.5)
    np.testing.assert_allclose(normalize_to_cube(Y), Y, atol=1e-12)
    Z = normalize_to_cube([[0, 0, 0], [4, 2, 2]])
    np.testing.assert_allclose(Z.max(axis=0), [0.5, 0.25, 0.25])
    np.testing.assert_array_equal(normalize_to_cube([[3.0, 3.0], [3.0, 3.0]]), np.zeros((2, 2)))


def test_instance_determinism():
    spec = InstanceSpec(n=50, sigma2=0.01, shuffle=True, outlier_fraction=0.2, seed=3)
    a, b = generate_instance(spec), generate_instance(spec)
    for x, y in ((a.P, b.P), (a.Q, b.Q), (a.true_matching, b.true_matching)):
        assert x.tobytes() == y.tobytes()
    c = generate_instance(InstanceSpec(n=50, sigma2=0.01, shuffle=True, outlier_fraction=0.2, seed=4))
    assert not np.array_equal(a.Q, c.Q)


def test_instance_structure():
    inst = generate_instance(InstanceSpec(n=40, shuffle=True, outlier_fraction=0.25, seed=1))
    assert is_rotation(inst.true_alignment.rotation)
    assert np.linalg.norm(inst.true_alignment.translation) <= 0.1
    assert np.all(np.abs(inst.Q) <= 0.5)
    assert len(inst.outlier_indices) == 10
    X = inst.recovery.apply(inst.P)
    clean = np.setdiff1d(np.arange(40), inst.outlier_indices)
    np.testing.assert_allclose(X[clean], inst.Q[inst.true_matching[clean]], atol=1e-12)


def test_instance_noise_variance():
    inst = generate_instance(InstanceSpec(n=2500, sigma2=0.01, seed=0))
    resid = inst.P - inst.true_alignment.apply(inst.Q)
    assert np.mean(np.sum(resid**2, axis=1)) == pytest.approx(3 * 0.01, rel=0.1)


def test_instance_from_model(tmp_path):
    X = np.random.default_rng(2).standard_normal((100, 3)) * 7
    save_cloud(X, tmp_path / "m.ply")
    inst = generate_instance(InstanceSpec(n=30, source=str(tmp_path / "m.ply"), seed=0))
    assert inst.Q.shape == (30, 3) and np.abs(inst.Q).max() <= 0.5 + 1e-12
    with pytest.raises(ValueError):
        generate_instance(InstanceSpec(n=300, source=str(tmp_path / "m.ply")))


def test_instance_spec_validation():
    for kw in ({"n": 2}, {"n": 10, "d": 1}, {"n": 10, "sigma2": -1}, {"n": 10, "outlier_fraction": 1.0}):
        with pytest.raises(ValueError):
            InstanceSpec(**kw)


def test_report_roundtrip_and_schema(tmp_path):
    rep = RunReport(
        algorithm="kabsch", instance={"n": 3}, cost_spec="z=2,loss=power:2,agg=sum",
        rotation=np.eye(3).tolist(), translation=[0.0, 0.0, 0.0], cost=2.0,
        candidates_evaluated=1, seed=0, optimal_ssd_cost=1.0, matching="identity",
    )
    assert rep.ratio == 2.0
    save_report(rep, tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    jsonschema.validate(data, REPORT_SCHEMA)
    assert load_report(tmp_path / "r.json") == rep
    zero = RunReport("kabsch", {}, "", np.eye(2).tolist(), [0.0, 0.0], 0.0, optimal_ssd_cost=0.0)
    assert zero.ratio is None
    with pytest.raises(ValueError):
        RunReport.from_dict({**data, "schema": 99})
