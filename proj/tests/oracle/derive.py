"""Independent oracle for constants frozen into the C++ tests.

Uses mpmath at 50 digits; nothing here imports or mirrors the C++ code.
Run: python3 tests/oracle/derive.py
"""
from mpmath import mp, mpf, exp, log, sqrt, pi, e

mp.dps = 50


def softmax(xs):
    m = max(xs)
    w = [exp(x - m) for x in xs]
    s = sum(w)
    return [v / s for v in w]


def show(name, values):
    if not isinstance(values, (list, tuple)):
        values = [values]
    print(f"{name}: " + ", ".join(mp.nstr(v, 17) for v in values))


q = softmax([mpf(1), mpf(2), mpf(3)])
show("boltzmann(1,2,3;beta=1)", q)
show("kl((.5,.5)||(.9,.1))", mpf("0.5") * log(mpf("0.5") / mpf("0.9")) + mpf("0.5") * log(mpf("0.5") / mpf("0.1")))
show("tv((.5,.5),(.9,.1))", (abs(mpf("0.5") - mpf("0.9")) + abs(mpf("0.5") - mpf("0.1"))) / 2)
kl = mpf("0.5") * log(mpf("0.5") / mpf("0.9")) + mpf("0.5") * log(mpf("0.5") / mpf("0.1"))
show("pinsker_bound", sqrt(kl / 2))
show("entropy(.9,.1)", -(mpf("0.9") * log(mpf("0.9")) + mpf("0.1") * log(mpf("0.1"))))
show("log(1+e)", log(1 + e))

def zscore(xs):
    n = len(xs)
    m = sum(xs) / n
    s = sqrt(sum((x - m) ** 2 for x in xs) / n)
    return [(x - m) / (s + mpf("1e-8")) for x in xs]

show("zscore(1,2,3)", zscore([mpf(1), mpf(2), mpf(3)]))
show("zscore(0,10)", zscore([mpf(0), mpf(10)]))

def noise(sig, dt, eta):
    return eta * sqrt(sig / (1 - sig)) * sqrt(-dt)

show("noise(0.5,-0.2,0.7)", noise(mpf("0.5"), mpf("-0.2"), mpf("0.7")))
show("noise ratio 0.8/0.2", noise(mpf("0.8"), mpf("-0.2"), 1) / noise(mpf("0.2"), mpf("-0.2"), 1))
show("logp_mean(gamma=1,eps=(1,0))", (-(mpf(1) ** 2) / 2 - log(2 * pi)) / 2)
show("logp_mean(gamma=0.5,eps=0)", -log(2 * pi * mpf("0.25")) / 2)
show("A uniform p (1,2,3)", [log(3 * v) for v in q])
show("lgmd (0,0),(2,0)", log(mpf(2) / sqrt(2)))
show("beta(75)", mpf("0.8") + (mpf("2.0") - mpf("0.8")) * 75 / 150)
show("Beta(3,3) var", mpf(3) * 3 / ((6) ** 2 * 7))
show("Beta(3,3) mean SE (1e5)", sqrt(mpf(1) / 28 / 10 ** 5))


def tree_evals(S, steps, B, independent_root):
    """Counts velocity evaluations by walking every node of the tree."""
    evals = 0
    # each node: current step index
    nodes = [0]
    pos = 0
    for i, s in enumerate(steps):
        if independent_root and i == 0 and s == 1:
            # B fresh roots at step 0, each integrated through step 0 (ODE) to
            # reach step 1 is not needed: roots replace the step-1 branch, the
            # children start at step 0 and step 0..s-1 run as ODE
            nodes = [0] * B
            for _ in nodes:
                evals += s - pos  # ODE steps 0..s-1 per root
            pos = s
            continue
        new = []
        for _ in nodes:
            evals += s - pos     # ODE steps pos..s-1
            evals += 1           # drift at the branch state, shared by B children
            new += [s + 1] * B
        nodes = new
        pos = s + 1
    for _ in nodes:
        evals += S - pos
    return evals, len(nodes)

print("tree_evals S=6 (1,3,5) B=3 independent:", tree_evals(6, [1, 3, 5], 3, True))
print("tree_evals S=6 (1,3,5) B=3 shared:", tree_evals(6, [1, 3, 5], 3, False))
print("tree_evals S=6 (1,2,3) B=3 shared:", tree_evals(6, [1, 2, 3], 3, False))
print("tree_evals S=6 (2,3,4) B=2 shared:", tree_evals(6, [2, 3, 4], 2, False))
