"""Shared helpers for the test suite."""
import numpy as np

from jumpgrad.model import CoefficientEval, DiscreteMarks, JumpSpec, ModelSpec, RewardEval

# filled by the acceptance tests, printed once at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def simple_model(d=1, n=1, dn=None, drift=None, vol=None, rate=None, terminal=None, horizon=1.0,
                 theta=None, **kw):
    """A model whose coefficients and rewards are zero unless given."""
    dn = d if dn is None else dn
    zero_vec = CoefficientEval(lambda t, x, th: np.zeros((x.shape[0], d)))
    zero_vol = CoefficientEval(lambda t, x, th: np.zeros((x.shape[0], d, dn)))
    zero_rew = CoefficientEval(lambda t, x, th: np.zeros(x.shape[0]))
    theta = np.zeros(n) if theta is None else theta
    rewards = RewardEval(rate or zero_rew, terminal or zero_rew)
    return ModelSpec(d, dn, n, horizon, theta, drift or zero_vec, vol or zero_vol, rewards, **kw)


def nonlinear_2d(theta=0.7, jumps=False):
    """Two-dimensional model with nonconstant second derivatives everywhere."""

    def mu(t, x, th):
        return np.stack([th[0] * np.sin(x[:, 1]), -0.5 * x[:, 0] * x[:, 1]], axis=1)

    def mu_dx(t, x, th):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 1] = th[0] * np.cos(x[:, 1])
        out[:, 1, 0] = -0.5 * x[:, 1]
        out[:, 1, 1] = -0.5 * x[:, 0]
        return out

    def mu_dxx(t, x, th):
        out = np.zeros((x.shape[0], 2, 2, 2))
        out[:, 0, 1, 1] = -th[0] * np.sin(x[:, 1])
        out[:, 1, 0, 1] = out[:, 1, 1, 0] = -0.5
        return out

    def mu_dth(t, x, th):
        out = np.zeros((x.shape[0], 1, 2))
        out[:, 0, 0] = np.sin(x[:, 1])
        return out

    def sig(t, x, th):
        return np.stack([0.3 + 0.1 * x[:, 0] ** 2, 0.2 * np.sin(x[:, 0])], axis=1)[:, :, None]

    def sig_dx(t, x, th):
        out = np.zeros((x.shape[0], 2, 1, 2))
        out[:, 0, 0, 0] = 0.2 * x[:, 0]
        out[:, 1, 0, 0] = 0.2 * np.cos(x[:, 0])
        return out

    def sig_dxx(t, x, th):
        out = np.zeros((x.shape[0], 2, 1, 2, 2))
        out[:, 0, 0, 0, 0] = 0.2
        out[:, 1, 0, 0, 0] = -0.2 * np.sin(x[:, 0])
        return out

    kw = {}
    if jumps:
        def chi(t, x, z, th):
            return 0.3 * x * z

        def chi_dx(t, x, z, th):
            return 0.3 * z[:, :, None] * np.eye(2)[None]

        kw = dict(jump=CoefficientEval(chi, chi_dx), jump_spec=JumpSpec(2.0, DiscreteMarks([[1.0], [-0.5]], [1.2, 0.8])))

    def rho(t, x, th):
        return x[:, 0] ** 2 + 0.5 * np.sin(x[:, 1])

    def rho_dx(t, x, th):
        return np.stack([2 * x[:, 0], 0.5 * np.cos(x[:, 1])], axis=1)

    def rho_dxx(t, x, th):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = 2.0
        out[:, 1, 1] = -0.5 * np.sin(x[:, 1])
        return out

    def g_dxx(t, x, th):
        return np.broadcast_to(np.array([[0.0, 1.0], [1.0, 0.0]]), (x.shape[0], 2, 2))

    rate = CoefficientEval(rho, rho_dx, rho_dxx)
    terminal = CoefficientEval(lambda t, x, th: x[:, 0] * x[:, 1], lambda t, x, th: x[:, ::-1].copy(), g_dxx)
    return simple_model(d=2, dn=1, n=1, theta=[theta], drift=CoefficientEval(mu, mu_dx, mu_dxx, mu_dth),
                        vol=CoefficientEval(sig, sig_dx, sig_dxx), rate=rate, terminal=terminal, **kw)
