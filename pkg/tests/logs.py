"""Random CAS logs for checking the verifier against the brute-force oracle."""

import random

from nvstack.harness.workload import CasOp, ExecutionLog


def serial_log(rng, n_ops, values):
    """Log of a genuine serial run: serializable by construction."""
    reg = init = rng.choice(values)
    ops = []
    for i in range(n_ops):
        old = reg if rng.random() < 0.5 else rng.choice(values)
        new = rng.choice(values)
        ok = reg == old
        if ok:
            reg = new
        ops.append(CasOp(i, rng.randint(1, 4), old, new, ok))
    rng.shuffle(ops)
    return ExecutionLog(init, ops, reg)


def perturb(rng, log):
    """Flip one result or move the final value: usually breaks serializability."""
    ops = [CasOp(o.op_id, o.thread, o.old, o.new, o.result) for o in log.ops]
    final = log.final
    if ops and rng.random() < 0.6:
        i = rng.randrange(len(ops))
        ops[i].result = not ops[i].result
    else:
        final = final + rng.choice((-1, 1))
    return ExecutionLog(log.init, ops, final)


def arbitrary_log(rng, n_ops, values):
    ops = [CasOp(i, 1, rng.choice(values), rng.choice(values), rng.random() < 0.4) for i in range(n_ops)]
    return ExecutionLog(rng.choice(values), ops, rng.choice(values))


def random_log(seed, max_successes=8):
    """One log with at most ``max_successes`` successful ops, values drawn from a tiny range."""
    rng = random.Random(seed)
    values = list(range(rng.randint(1, 4)))  # few values: lots of duplicates
    while True:
        n = rng.randint(0, 12)
        kind = rng.random()
        if kind < 0.4:
            log = serial_log(rng, n, values)
        elif kind < 0.7:
            log = perturb(rng, serial_log(rng, n, values))
        else:
            log = arbitrary_log(rng, n, values)
        if len(log.successes()) <= max_successes:
            return log
