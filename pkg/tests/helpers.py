"""Shared test oracles: central finite differences and policy slicing."""

import numpy as np

from mfcontrol import autodiff as ad
from mfcontrol import embeddings as emb
from mfcontrol import networks as nets
from mfcontrol import simulate as sim


def central_fd(f, arr: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central finite differences of a scalar function of one array, in place.

    Returns the gradient at the current value; `indices` restricts the probe
    to a flat-index subset (gradient entries elsewhere are left at zero).
    """
    flat = arr.reshape(-1)
    grad = np.zeros_like(flat)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(arr.shape)


def rollout_cost_fn(problem, policy, plan):
    def f():
        return sim.rollout(problem, policy, plan, record_for_training=False).cost_value
    return f


def gradcheck_rollout(problem, policy, params, plan, h=1e-5, max_per_block=None):
    """Backprop through a full rollout vs central differences, blockwise.

    Returns {block name: relative L2 error}; blocks larger than max_per_block
    are subsampled on an even flat-index grid.
    """
    rec = sim.rollout(problem, policy, plan, record_for_training=True)
    grads_all = rec.tape.backward(rec.total_cost)
    cost = rollout_cost_fn(problem, policy, plan)
    report = {}
    for (name, arr), leaf in zip(params.named_arrays(), rec.param_leaves):
        g = grads_all[leaf.nid]
        g = np.zeros_like(arr) if g is None else np.asarray(g)
        if max_per_block is not None and arr.size > max_per_block:
            idx = np.unique(np.linspace(0, arr.size - 1, max_per_block).astype(int))
        else:
            idx = np.arange(arr.size)
        fd = central_fd(cost, arr, h=h, indices=idx)
        num = np.linalg.norm((g.reshape(-1) - fd.reshape(-1))[idx])
        den = np.linalg.norm(fd.reshape(-1)[idx])
        report[name] = num / den if den > 0 else num
    return report


def slice_policy(problem, policy, params, times, grid_halfwidth=0.5,
                 grid_points=21, population_seed=424242, populations=2):
    """Learned control and the population mean on a state grid at the given
    times, using fixed representative populations simulated under the policy.

    Returns a list of (t, mean, grid, actions[grid_points, k]) tuples.
    """
    out = []
    for j in range(populations):
        plan = sim.make_noise_plan(200, problem.d, problem.n_steps, problem.dt,
                                   seed=(population_seed, 2, j))
        rec = sim.rollout(problem, policy, plan, keep_trajectory=True)
        for t_req in times:
            s = int(round(t_req / problem.dt))
            batch = rec.states[s]
            mean = batch.mean(axis=0)
            grid = np.linspace(mean[0] - grid_halfwidth, mean[0] + grid_halfwidth,
                               grid_points)
            tape = ad.Tape(grad=False)
            policy.bind(tape)
            states = np.tile(mean, (grid_points, 1))
            states[:, 0] = grid
            cols = [tape.tensor(np.full((grid_points, 1), t_req)),
                    tape.tensor(states)]
            if params.embed_net is not None:
                m_row = emb.embed(params.embed_cfg, policy._embed,
                                  tape.tensor(batch))
                cols.append(ad.broadcast_row(m_row, grid_points))
            inputs = ad.concat_cols(cols)
            acts = np.column_stack([nets.mlp_forward(reg, inputs).value[:, 0]
                                    for reg in policy._control])
            out.append((t_req, mean, grid, acts))
    return out
