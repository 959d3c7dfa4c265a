"""Small repair instances shared by the SRR and acceptance tests."""
import numpy as np

from xtransfer import anchor, srr, stats, synth, zoo
from xtransfer.zoo import segment_model


def random_source(seed, shape=(3, 8, 8), depth=4, n_classes=5, per_class=4):
    """Untrained random-weight source with anchor exemplars drawn from a class family."""
    rng = np.random.default_rng(seed)
    spec = zoo.synthetic_source_spec(shape, depth)
    model = segment_model(spec, seed=seed)
    fam = synth.SourceFamily.create(rng, n_classes, shape)
    x, y = fam.sample(rng, per_class)
    return model, x, y


def repair_instance(source, ex_x, ex_y, depth, seed, target_shape=(4, 1, 16), n_classes=3, shots=3,
                    negatives="initial"):
    rng = np.random.default_rng(seed)
    outs = source.forward(ex_x)
    ins = [ex_x] + outs[:-1]
    unit = source.lunits[depth]
    sp = anchor.fit_anchor_space(stats.mmc(outs[depth]), ex_y)
    fam = synth.TargetFamily.create(rng, n_classes, target_shape)
    xs, ys = fam.sample(rng, 0, shots)
    conn = srr.build_connector(target_shape, unit.in_shape, seed=seed, in_stats=srr.channel_stats(xs),
                               out_stats=srr.channel_stats(ins[depth]))
    prepared = srr.prepare_alignment(sp, unit, conn, xs, ys)
    _, pairing, tr = prepared
    prob = srr.RepairProblem(unit, sp, pairing, tr, xs, ys, negatives=negatives)
    return prob, conn, prepared
