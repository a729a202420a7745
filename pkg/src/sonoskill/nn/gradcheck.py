import numpy as np


def grad_check(loss_fn, params, analytic, h=1e-5):
    """Max relative error between analytic gradients and central differences.

    ``loss_fn()`` must read ``params`` in place. Error per element is
    |ga - gn| / max(1, |ga| + |gn|).
    """
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            gn = (up - down) / (2 * h)
            ga = gflat[i]
            worst = max(worst, abs(ga - gn) / max(1.0, abs(ga) + abs(gn)))
    return worst
