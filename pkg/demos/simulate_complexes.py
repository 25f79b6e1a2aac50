"""Roll out a (3,3) charged-complex system and report what the integrator conserves."""

import numpy as np

from eghn.simulator import rollout, stick_drift, total_energy


def main():
    traj = rollout(3, 3, T=1500, seed=7)
    shapes = ", ".join(f"{c.shape}{len(c.indices)}" for c in traj.complexes)
    print(f"complexes: {shapes}; charges {traj.charges.astype(int).tolist()}")
    p = traj.velocities.sum(axis=1)
    E = total_energy(traj.positions, traj.velocities, traj.charges, 1e-2)
    print(f"stick drift     {stick_drift(traj.positions, traj.sticks):.2e}")
    print(f"momentum drift  {np.abs(p - p[0]).max():.2e}")
    print(f"energy drift    {abs(E[-1] - E[0]) / abs(E[0]):.2e}")
    moved = np.linalg.norm(traj.positions[-1] - traj.positions[0], axis=-1)
    print(f"mean displacement after 1500 steps: {moved.mean():.3f}")


if __name__ == "__main__":
    main()
