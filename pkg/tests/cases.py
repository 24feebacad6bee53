"""Seeded inputs shared by the unit tests and the acceptance suite."""
import numpy as np

from daftnet import tensor as T


def rand(rng, *shape):
    return rng.standard_normal(shape)


# every differentiable primitive as (name, op, input factory); inputs are float64
def _primitives():
    pos = lambda rng, *s: rng.uniform(0.5, 2.0, s)
    away_from_zero = lambda rng, *s: rng.choice([-1, 1], s) * rng.uniform(0.2, 2.0, s)
    return [
        ("add", T.add, lambda r: [rand(r, 3, 4), rand(r, 3, 4)]),
        ("add_broadcast", T.add, lambda r: [rand(r, 3, 4), rand(r, 4)]),
        ("sub", T.sub, lambda r: [rand(r, 3, 4), rand(r, 3, 4)]),
        ("mul", T.mul, lambda r: [rand(r, 3, 4), rand(r, 3, 4)]),
        ("neg", T.neg, lambda r: [rand(r, 5)]),
        ("reciprocal", T.reciprocal, lambda r: [pos(r, 5)]),
        ("relu", T.relu, lambda r: [away_from_zero(r, 6)]),
        ("sigmoid", T.sigmoid, lambda r: [rand(r, 6)]),
        ("tanh", T.tanh, lambda r: [rand(r, 6)]),
        ("exp", T.exp, lambda r: [rand(r, 6)]),
        ("log", T.log, lambda r: [pos(r, 6)]),
        ("sum", lambda a: T.tsum(a, axis=1), lambda r: [rand(r, 3, 4)]),
        ("mean", T.mean, lambda r: [rand(r, 3, 4)]),
        ("reshape", lambda a: T.reshape(a, (4, 3)), lambda r: [rand(r, 3, 4)]),
        ("transpose", T.transpose, lambda r: [rand(r, 3, 4)]),
        ("matmul", T.matmul, lambda r: [rand(r, 3, 4), rand(r, 4, 2)]),
        ("concat_lastdim", lambda a, b: T.concat_lastdim([a, b]), lambda r: [rand(r, 2, 3), rand(r, 2, 1)]),
        ("slice_lastdim", lambda a: T.slice_lastdim(a, 1, 3), lambda r: [rand(r, 2, 4)]),
        ("broadcast_channelwise", lambda v: T.broadcast_channelwise(v, (2, 3, 2, 2, 2)), lambda r: [rand(r, 2, 3)]),
        ("logsumexp", lambda a: T.logsumexp(a, axis=1), lambda r: [rand(r, 3, 4)]),
        ("conv3d", lambda x, w, b: T.conv3d(x, w, b, 1, 1), lambda r: [rand(r, 1, 2, 3, 3, 3), rand(r, 2, 2, 3, 3, 3), rand(r, 2)]),
        ("conv3d_strided", lambda x, w: T.conv3d(x, w, None, 2, 1), lambda r: [rand(r, 1, 2, 4, 4, 4), rand(r, 2, 2, 3, 3, 3)]),
        ("global_avg_pool3d", T.global_avg_pool3d, lambda r: [rand(r, 2, 3, 2, 2, 2)]),
        ("batch_norm_train", lambda x, g, b: T.batch_norm(x, g, b, np.zeros(2), np.ones(2), True),
         lambda r: [rand(r, 2, 2, 2, 2, 2), rand(r, 2), rand(r, 2)]),
        ("batch_norm_eval", lambda x, g, b: T.batch_norm(x, g, b, np.full(2, 0.3), np.full(2, 1.7), False),
         lambda r: [rand(r, 2, 2, 2, 2, 2), rand(r, 2), rand(r, 2)]),
    ]


PRIMITIVES = _primitives()


def cindex_instance(seed, n=None, censor=True):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(5, 16))
    time = np.round(rng.uniform(0.5, 6, n), 1)
    event = rng.uniform(size=n) < (0.6 if censor else 1.1)
    # two events at the earliest distinct times guarantee comparable pairs below the default tau
    first, second = np.unique(time)[:2]
    event[np.flatnonzero(time == first)[0]] = True
    event[np.flatnonzero(time == second)[0]] = True
    risk = np.round(rng.standard_normal(n), 1)  # rounding creates some risk ties
    return risk, time, event
