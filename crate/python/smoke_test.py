"""Smoke test for the Python extension.

Build and install first:
    pip install --no-build-isolation -e crates/py
"""

import math

import blockdiff


def main():
    g = blockdiff.Grammar()
    mask, eos, pad = g.special_ids
    assert (mask, eos, pad) == (0, 1, 2)

    records = g.sample(seed=3, n=4)
    assert len(records) == 4
    context, response, labels = records[0]
    assert response[-1] == eos
    p, r, f1 = g.finding_f1(response, labels)
    assert f1 == 1.0, (p, r, f1)
    assert blockdiff.rouge_l(response, response) == 1.0

    model = blockdiff.Model.random(g.vocab_size, seed=0)
    tokens, tpf, passes = model.decode(context, mode="onestep", block_size=4, max_blocks=3)
    assert passes >= 1 and tpf == 4.0, (tpf, passes)
    ar_tokens, ar_tpf, _ = model.decode(context, mode="ar", max_blocks=5)
    assert ar_tpf == 1.0

    curve = blockdiff.builtin_bias_curve("correlated_pair")
    assert abs(curve[-1] - math.log(2)) < 1e-12, curve
    bias = blockdiff.mean_field_bias(2, 2, [0.5, 0.0, 0.0, 0.5], [None, None])
    assert abs(bias - math.log(2)) < 1e-12

    s = [blockdiff.rad_savings(p, 48, 4) for p in (0, 64, 512)]
    assert s[0] < s[1] < s[2] < 0.75, s

    print("blockdiff smoke test passed:", g.detokenize(response))


if __name__ == "__main__":
    main()
