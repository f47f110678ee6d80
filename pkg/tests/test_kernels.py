import numpy as np
import pytest

from rosettavae import _kernels
from rosettavae import autodiff as ad
from rosettavae import vae


def random_instance(seed, hidden=(6, 5), input_dim=4, latent=2, batch=7, anchors=3):
    rng = np.random.default_rng(seed)
    arch = vae.ArchSpec(input_dim=input_dim, latent_dim=latent, hidden=hidden)
    model = vae.init_model(arch, seed=seed)
    x = rng.standard_normal((batch, input_dim))
    eps = rng.standard_normal((batch, latent))
    ros = None
    if anchors:
        ros = vae.RosettaSet(
            inputs=rng.standard_normal((anchors, input_dim)),
            latents=rng.standard_normal((anchors, latent)),
        )
    return model, x, eps, ros


def test_python_backend_always_available():
    assert "python" in _kernels.available_backends()
    assert _kernels.BACKEND in _kernels.available_backends()
    assert _kernels.get_impl("python").NAME == "python"


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        _kernels.get_impl("jit")


def test_default_backend_is_compiled_when_built():
    if "compiled" in _kernels.available_backends():
        assert _kernels.BACKEND == "compiled"
    else:
        assert _kernels.BACKEND == "python"


@pytest.mark.parametrize("hidden", [(), (6,), (6, 5)])
@pytest.mark.parametrize("with_anchors", [False, True])
def test_backends_agree(hidden, with_anchors):
    if "compiled" not in _kernels.available_backends():
        pytest.skip("compiled backend not built")
    model, x, eps, ros = random_instance(
        seed=17 + len(hidden), hidden=hidden, anchors=3 if with_anchors else 0
    )
    rho_eff = 0.8 if with_anchors else 0.0
    lp, gp = vae.fused_loss_and_grad(model, x, eps, 1.3, rho_eff, ros, backend="python")
    lc, gc = vae.fused_loss_and_grad(model, x, eps, 1.3, rho_eff, ros, backend="compiled")
    assert lc == pytest.approx(lp, rel=1e-9)
    for name in model.params.names():
        scale = max(np.abs(gp[name]).max(), 1.0)
        assert np.abs(gp[name] - gc[name]).max() / scale < 1e-9


@pytest.mark.parametrize("backend", ["python", "compiled"])
def test_kernel_matches_tape(backend):
    if backend not in _kernels.available_backends():
        pytest.skip(f"{backend} backend not built")
    model, x, eps, ros = random_instance(seed=23)
    config = vae.TrainConfig(beta=1.3, rho=2.0, batch_size=x.shape[0])
    graph = vae.rosetta_loss(model, x, ros, config, eps)
    tape_grads = ad.backward(graph, model.params)
    rho_eff = config.effective_rho(len(ros))
    loss, grads = vae.fused_loss_and_grad(
        model, x, eps, config.beta, rho_eff, ros, backend=backend
    )
    assert loss == pytest.approx(graph.value, rel=1e-10)
    for name in model.params.names():
        scale = max(np.abs(tape_grads[name]).max(), 1.0)
        assert np.abs(tape_grads[name] - grads[name]).max() / scale < 1e-9


def test_training_agrees_across_backends():
    if "compiled" not in _kernels.available_backends():
        pytest.skip("compiled backend not built")
    rows = np.random.default_rng(5).standard_normal((24, 4))
    arch = vae.ArchSpec(input_dim=4, latent_dim=2, hidden=(6,))
    config = vae.TrainConfig(epochs=2, batch_size=8, seed=3)
    a = vae.train(arch, rows, config, backend="python").model
    b = vae.train(arch, rows, config, backend="compiled").model
    for name in a.params.names():
        assert np.abs(a.params[name] - b.params[name]).max() < 1e-8


def test_layout_pack_unpack_roundtrip():
    arch = vae.ArchSpec(input_dim=4, latent_dim=3, hidden=(5,))
    model = vae.init_model(arch, seed=2)
    layout = vae._layout_for(arch)
    flat = layout.pack(model.params)
    views = layout.unpack(flat)
    assert set(views) == set(model.params.names())
    for name in model.params.names():
        assert np.array_equal(views[name], model.params[name])
