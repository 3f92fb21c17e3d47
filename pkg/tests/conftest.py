import numpy as np
import pytest

from occlang.grid import FieldConfig, FieldSet, SceneBounds


@pytest.fixture
def unit_bounds():
    return SceneBounds(np.zeros(3), np.ones(3))


@pytest.fixture
def small_fields(unit_bounds):
    """2-level 4^3 fields with 2x16 decoders in float64, large random features."""
    cfg = FieldConfig(resolutions=((4, 4, 4), (4, 4, 4)), hidden=(16, 16), init_scale=0.5)
    return FieldSet.create(unit_bounds, 4, cfg, np.random.default_rng(1), dtype=np.float64)


def random_unit(rng, n, d=3):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gradient_errors(fields, bundle, samples, weights, sg_weights=None, step=1e-4, floor=1e-7):
    """Relative error of the analytic total-loss gradient against central differences, per parameter.

    Entries where both gradients are below ``floor`` count as exact: at step
    1e-4 the float64 round-off of a central difference on a loss of order 10
    is about 1e-10, so relative errors of smaller gradients measure noise.
    """
    from occlang.objective import loss_and_grads

    _, grads, _ = loss_and_grads(fields, bundle, samples, weights, sg_weights)
    dense = dict(grads.dense(fields))
    errs = []
    for name, arr in fields.parameters():
        flat, g = arr.reshape(-1), dense[name].reshape(-1)
        for i in range(flat.size):
            v = flat[i]
            flat[i] = v + step
            hi = loss_and_grads(fields, bundle, samples, weights, sg_weights, need_grad=False)[0].total
            flat[i] = v - step
            lo = loss_and_grads(fields, bundle, samples, weights, sg_weights, need_grad=False)[0].total
            flat[i] = v
            num = (hi - lo) / (2 * step)
            den = max(abs(num), abs(g[i]))
            errs.append(0.0 if den < floor else abs(num - g[i]) / den)
    return np.array(errs)


def gradcheck_instance(seed=1, n_rays=8, n_samples=8):
    """2-level 4^3 fields, random rays with colors, depths and unit features, plus SCP-style weights."""
    from occlang.render import RayBundle, sample_bundle

    rng = np.random.default_rng(seed)
    bounds = SceneBounds(np.zeros(3), np.ones(3))
    cfg = FieldConfig(resolutions=((4, 4, 4), (4, 4, 4)), hidden=(16, 16), init_scale=0.5)
    fields = FieldSet.create(bounds, 4, cfg, rng, dtype=np.float64)
    o = rng.uniform(0.2, 0.8, (n_rays, 3))
    d = random_unit(rng, n_rays)
    feat = random_unit(rng, n_rays, 4)
    bundle = RayBundle(o, d, rng.random((n_rays, 3)), rng.uniform(0.1, 0.5, n_rays), feat)
    bundle, samples = sample_bundle(bundle, bounds, n_samples, 0.05, rng)
    return fields, bundle, samples, rng.uniform(0, 4, len(bundle))


def indicator_fields(bounds, resolution, indicator, sem_dim=4, sem_feature=None):
    """Single-level fields whose occupancy at grid vertices is ``indicator`` (0/1) up to sigmoid(+-40).

    Channel 0 of the geometry grid holds the indicator; the occupancy decoder
    passes it through both tanh layers and maps {0, 1} to logits {-40, +40}.
    """
    cfg = FieldConfig(resolutions=(tuple(resolution),), hidden=(4, 4), geo_feat=2, color_feat=2, sem_feat=4)
    f = FieldSet.create(bounds, sem_dim, cfg, np.random.default_rng(0), dtype=np.float64)
    lvl = f.geometry.levels[0]
    axes = [bounds.min_corner[a] + lvl.voxel_size[a] * np.arange(resolution[a]) for a in range(3)]
    verts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    lvl.features[:] = 0.0
    lvl.features[:, 0] = np.asarray(indicator(verts), dtype=np.float64)
    dec = f.occ_decoder
    for w, b in dec.layers:
        w[:] = 0
        b[:] = 0
    dec.layers[0][0][0, 0] = 1.0
    dec.layers[1][0][0, 0] = 1.0
    dec.layers[-1][0][0, 0] = 80.0 / np.tanh(np.tanh(1.0))
    dec.layers[-1][1][:] = -40.0
    if sem_feature is not None:
        for w, b in f.sem_decoder.layers:
            w[:] = 0
            b[:] = 0
        f.sem_decoder.layers[-1][1][:] = sem_feature
    return f


ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    """Store and print the PASS/FAIL line of one acceptance criterion."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
