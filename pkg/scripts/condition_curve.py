"""Print C(alpha, k) against k and the smallest contracting k for given Jacobian norms."""

import argparse

from pfpe.spectral import condition_function, min_k_for_contraction

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--alpha", type=float, default=0.1)
p.add_argument("--lam", type=float, default=1.0, help="eigenvalue of H with the largest |1 - alpha*lambda|")
p.add_argument("--lam-min", type=float, default=None, help="smallest eigenvalue of H (defaults to --lam)")
p.add_argument("--j-td", type=float, default=1.5)
p.add_argument("--j-fpe", type=float, default=0.85)
p.add_argument("--k-max", type=int, default=60)
args = p.parse_args()

print("k,condition_value")
for k in range(1, args.k_max + 1):
    print(f"{k},{condition_function(args.alpha, k, args.lam, args.j_td, args.j_fpe):.6f}")
k_min = min_k_for_contraction(args.alpha, args.lam if args.lam_min is None else args.lam_min, args.j_td, args.j_fpe)
print(f"# smallest k with C < 1: {k_min}")
