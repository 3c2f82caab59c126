"""Symbolic derivation of the analytic fixture values used in the Rust tests.

Run with `python3 scripts/derive_fixtures.py`. Every constant frozen into
`crates/core/src/fixtures.rs` tests or the acceptance suite is printed here.
"""
import sympy as sp


def christoffel(g, coords):
    n = len(coords)
    ginv = g.inv()
    return [[[sp.simplify(sum(ginv[k, l] * (sp.diff(g[j, l], coords[i]) + sp.diff(g[i, l], coords[j])
                                            - sp.diff(g[i, j], coords[l])) for l in range(n)) / 2)
              for k in range(n)] for j in range(n)] for i in range(n)]


def riemann_low(g, gam, coords):
    # R_ij^k_l = d_i G_jl^k - d_j G_il^k + G_im^k G_jl^m - G_jm^k G_il^m ; lower k with g
    n = len(coords)
    R = {}
    for i in range(n):
        for j in range(n):
            for k in range(n):
                for l in range(n):
                    up = (sp.diff(gam[j][l][k], coords[i]) - sp.diff(gam[i][l][k], coords[j])
                          + sum(gam[i][m][k] * gam[j][l][m] - gam[j][m][k] * gam[i][l][m] for m in range(n)))
                    R[(i, j, k, l)] = up
    low = {}
    for (i, j, k, l) in R:
        low[(i, j, k, l)] = sp.simplify(sum(g[k, m] * R[(i, j, m, l)] for m in range(n)))
    return low


print("== sphere2: g = diag(1, sin^2 th) ==")
th, ph = sp.symbols("theta phi")
g = sp.diag(1, sp.sin(th) ** 2)
gam = christoffel(g, [th, ph])
print("Gamma^th_{ph ph} =", gam[1][1][0])
print("Gamma^ph_{th ph} =", gam[0][1][1])
low = riemann_low(g, gam, [th, ph])
print("R_{th ph th ph} =", low[(0, 1, 0, 1)])
print("R_{th ph th ph} at pi/2 =", low[(0, 1, 0, 1)].subs(th, sp.pi / 2))
print("Gauss check R_ijkl - (g_ik g_jl - g_jk g_il):",
      {key: sp.simplify(val - (g[key[0], key[2]] * g[key[1], key[3]] - g[key[1], key[2]] * g[key[0], key[3]]))
       for key, val in low.items() if val != 0})

print("== exp_potential(1): psi = e^x ==")
x, e = sp.symbols("xi eta", positive=True)
psi = sp.exp(x)
eta = sp.diff(psi, x)
xi_of_eta = sp.solve(sp.Eq(e, eta), x)[0]
psi_star = sp.simplify((x * eta - psi).subs(x, xi_of_eta))
print("psi* =", psi_star, " at eta=1:", psi_star.subs(e, 1))
print("Gamma*^1_11 = g^-1 d g =", sp.simplify(sp.diff(sp.exp(x), x) / sp.exp(x)))
print("Levi-Civita Gamma^1_11 = 1/2 g^-1 dg =", sp.simplify(sp.diff(sp.exp(x), x) / (2 * sp.exp(x))))

print("== gaussian1d: psi = -t1^2/(4 t2) - 1/2 log(-2 t2) ==")
t1, t2 = sp.symbols("theta1 theta2")
e1, e2 = sp.symbols("eta1 eta2")
psi = -t1 ** 2 / (4 * t2) - sp.log(-2 * t2) / 2
grad = [sp.simplify(sp.diff(psi, v)) for v in (t1, t2)]
hess = sp.Matrix(2, 2, lambda i, j: sp.simplify(sp.diff(psi, (t1, t2)[i], (t1, t2)[j])))
print("grad =", grad)
print("hess =", hess)
for a, v in enumerate((t1, t2)):
    print("d_%d hess =" % a, sp.simplify(hess.diff(v)))
sol = sp.solve([sp.Eq(e1, grad[0]), sp.Eq(e2, grad[1])], [t1, t2], dict=True)[0]
psi_star = sp.simplify((t1 * grad[0] + t2 * grad[1] - psi).subs(sol))
print("inverse gradient map =", sol)
print("psi* =", psi_star)
gs = [sp.simplify(sp.diff(psi_star, v)) for v in (e1, e2)]
print("grad psi* =", gs)
hs = sp.Matrix(2, 2, lambda i, j: sp.simplify(sp.diff(psi_star, (e1, e2)[i], (e1, e2)[j])))
print("hess psi* =", hs)
pt = {t1: sp.Rational(1, 5), t2: -1}
print("sample point (0.2, -1):")
print("  psi =", sp.N(psi.subs(pt), 17))
print("  eta =", [sp.N(v.subs(pt), 17) for v in grad])
print("  hess =", [sp.N(v.subs(pt), 17) for v in hess])
eta_pt = {e1: grad[0].subs(pt), e2: grad[1].subs(pt)}
print("  psi*(eta) =", sp.N(psi_star.subs(eta_pt), 17))
print("  hess psi* . hess psi =", sp.simplify(hs.subs(eta_pt) * hess.subs(pt)))


def affine_decompose(f, xi, coords, eta=None):
    """Solve d_i d_j f = Gamma_ij^k d_k f - g_ij xi [- k_ij eta] and
    d_i xi = S_i^k d_k f + tau_i xi [+ mu_i eta] in the frame (d f, xi[, eta])."""
    n = len(coords)
    cols = [sp.diff(f, c) for c in coords] + [xi] + ([eta] if eta is not None else [])
    frame = sp.Matrix.hstack(*cols)
    out = {"Gamma": {}, "g": sp.zeros(n, n), "k": sp.zeros(n, n), "S": sp.zeros(n, n), "tau": [], "mu": []}
    for i in range(n):
        for j in range(n):
            sol = sp.simplify(frame.solve(sp.diff(f, coords[i], coords[j])))
            for k in range(n):
                out["Gamma"][(i, j, k)] = sol[k]
            out["g"][i, j] = -sol[n]
            if eta is not None:
                out["k"][i, j] = -sol[n + 1]
        sol = sp.simplify(frame.solve(sp.diff(xi, coords[i])))
        for k in range(n):
            out["S"][k, i] = sol[k]
        out["tau"].append(sol[n])
        if eta is not None:
            out["mu"].append(sol[n + 1])
    return out


def conormal(f, xi, coords, eta=None):
    rows = [sp.diff(f, c).T for c in coords] + ([eta.T] if eta is not None else []) + [xi.T]
    rhs = sp.Matrix([0] * (len(rows) - 1) + [1])
    return sp.simplify(sp.Matrix.vstack(*rows).solve(rhs))


print("== paraboloid(2): f = (x, y, (x^2+y^2)/2), xi = -e3 ==")
x1, x2 = sp.symbols("x y", real=True)
fp = sp.Matrix([x1, x2, (x1 ** 2 + x2 ** 2) / 2])
xip = sp.Matrix([0, 0, -1])
dp = affine_decompose(fp, xip, [x1, x2])
print("g =", dp["g"], " Gamma nonzero =", {k: v for k, v in dp["Gamma"].items() if v != 0})
print("S =", dp["S"], " tau =", dp["tau"])
print("conormal phi =", list(conormal(fp, xip, [x1, x2])))

print("== cone_codim2: f = (x, y, e^x + e^y, 1), xi = -e3 + f/4, eta = f ==")
fc = sp.Matrix([x1, x2, sp.exp(x1) + sp.exp(x2), 1])
xic = sp.Matrix([0, 0, -1, 0]) + fc / 4
dc = affine_decompose(fc, xic, [x1, x2], eta=fc)
print("g =", dc["g"], " k =", dc["k"], " Gamma nonzero =", {k: v for k, v in dc["Gamma"].items() if v != 0})
print("S =", dc["S"], " tau =", dc["tau"], " mu =", dc["mu"])
phic = conormal(fc, xic, [x1, x2], eta=fc)
print("conormal phi =", list(phic))
print("phi . f =", sp.simplify((phic.T * fc)[0]), " phi . xi =", sp.simplify((phic.T * xic)[0]))

print("== sphere2 with xi = +f (outward radial) ==")
fs = sp.Matrix([sp.sin(th) * sp.cos(ph), sp.sin(th) * sp.sin(ph), sp.cos(th)])
ds = affine_decompose(fs, fs, [th, ph])
print("g =", ds["g"], " S =", ds["S"], " tau =", ds["tau"])
print("conormal phi =", list(conormal(fs, fs, [th, ph])))
dsm = affine_decompose(fs, -fs, [th, ph])
print("with xi = -f: g =", dsm["g"], " S =", dsm["S"], " tau =", dsm["tau"])
