import numpy as np
import torch

from semsplat.train.optim import Adam, AdamState, ParamGroup, adam_update


def scripted_adam(x, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Step-by-step reference written out from the update rule."""
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        trace.append(x.copy())
    return trace


class TestAdam:
    def test_quadratic_trace(self, rng):
        A = rng.normal(size=(4, 4))
        A = A @ A.T + np.eye(4)
        b = rng.normal(size=4)
        x0 = rng.normal(size=4)
        ref = scripted_adam(x0, lambda x: A @ x - b, 0.05, 10)

        p = torch.tensor(x0, requires_grad=True)
        opt = Adam([ParamGroup([p], 0.05)])
        At, bt = torch.from_numpy(A), torch.from_numpy(b)
        for k in range(10):
            opt.zero_grad()
            (0.5 * p @ At @ p - bt @ p).backward()
            opt.step()
            assert np.abs(p.detach().numpy() - ref[k]).max() < 1e-10

        x, st = x0.copy(), AdamState(np.zeros(4), np.zeros(4))
        for k in range(10):
            x = adam_update(x, A @ x - b, st, 0.05)
            assert np.abs(x - ref[k]).max() < 1e-10

    def test_zero_gradient(self):
        p = torch.tensor([1.0, -2.0], dtype=torch.float64, requires_grad=True)
        opt = Adam([ParamGroup([p], 0.1)])
        for _ in range(3):
            p.grad = torch.zeros(2, dtype=torch.float64)
            opt.step()
        assert p.detach().tolist() == [1.0, -2.0]

    def test_constant_gradient_limit(self):
        x, st = np.zeros(3), AdamState(np.zeros(3), np.zeros(3))
        g = np.array([0.5, -3.0, 1e-3])
        for _ in range(2000):
            prev = x
            x = adam_update(x, g, st, 0.01)
        assert np.allclose(x - prev, -0.01 * np.sign(g), rtol=1e-3)

    def test_non_finite_gradient_skipped(self, caplog):
        a = torch.zeros(2, dtype=torch.float64, requires_grad=True)
        b = torch.zeros(2, dtype=torch.float64, requires_grad=True)
        opt = Adam([ParamGroup([a], 0.1, "a"), ParamGroup([b], 0.1, "b")])
        a.grad = torch.tensor([np.nan, 1.0], dtype=torch.float64)
        b.grad = torch.ones(2, dtype=torch.float64)
        opt.step()
        assert opt.skipped == 1
        assert a.detach().tolist() == [0.0, 0.0]
        assert np.allclose(b.detach().numpy(), -0.1)
        assert "non-finite" in caplog.text

    def test_learning_rate_tiers(self):
        a = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        b = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        opt = Adam([ParamGroup([a], 0.0025), ParamGroup([b], 0.0001)])
        a.grad = torch.ones(1, dtype=torch.float64)
        b.grad = torch.ones(1, dtype=torch.float64)
        opt.step()
        assert np.isclose(a.item(), -0.0025) and np.isclose(b.item(), -0.0001)

    def test_export_import_resumes_exactly(self, rng):
        x0 = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(6)]

        def run(split):
            p = torch.tensor(x0, requires_grad=True)
            opt = Adam([ParamGroup([p], 0.01)])
            for k, g in enumerate(grads):
                if k == split:
                    state = opt.export_state()
                    p = torch.tensor(p.detach().numpy(), requires_grad=True)
                    opt = Adam([ParamGroup([p], 0.01)])
                    opt.import_state(state)
                p.grad = torch.from_numpy(g)
                opt.step()
            return p.detach().numpy()

        assert np.array_equal(run(None), run(3))
