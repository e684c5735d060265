"""Regenerate the argon cross-section tables shipped in ``src/ltpic/data``.

Elastic (momentum transfer), excitation and ionization use analytic forms modelled on
published fits to argon swarm data (approximate stand-ins); the metastable
(two-step) ionization uses a Lotz formula with a 4.21 eV threshold.
"""

from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "ltpic" / "data"
ION_TH = 15.76
EXC_TH = 11.5
MET_ION_TH = 4.21


def q_elastic(en):
    return (
        np.abs(
            6.0 / (1.0 + en / 0.1 + (en / 0.6) ** 2) ** 3.3
            - 1.1 * en**1.4 / (1.0 + (en / 15.0) ** 1.2) / np.sqrt(1.0 + (en / 5.5) ** 2.5 + (en / 60.0) ** 4.1)
        )
        + 0.05 / (1.0 + en / 10.0) ** 2
        + 0.01 * en**3 / (1.0 + (en / 12.0) ** 6)
    ) * 1e-20


def q_excitation(en):
    x = np.maximum(en - EXC_TH, 0.0)
    q = 0.034 * x**1.1 * (1.0 + (en / 15.0) ** 2.8) / (1.0 + (en / 23.0) ** 5.5) + 0.023 * x / (1.0 + en / 80.0) ** 1.9
    return np.where(en > EXC_TH, q, 0.0) * 1e-20


def q_ionization(en):
    x = np.maximum(en - ION_TH, 0.0)
    q = 970.0 * x / (70.0 + en) ** 2 + 0.06 * x**2 * np.exp(-en / 9.0)
    return np.where(en > ION_TH, q, 0.0) * 1e-20


def q_metastable_ionization(en):
    # Lotz: sigma = a * ln(E/I) / (E I), a = 4.5e-14 cm^2 eV^2, one 4s electron
    ratio = np.maximum(en / MET_ION_TH, 1.0)
    return np.where(en > MET_ION_TH, 4.5e-14 * np.log(ratio) / (en * MET_ION_TH), 0.0) * 1e-4


def write(name, species, process, threshold, energies, sigma, note):
    lines = [f"# {note}", f"SPECIES {species}", f"PROCESS {process}", f"THRESHOLD {threshold}"]
    lines.append("# energy(eV)  sigma(m^2)")
    lines += [f"{e:.6e} {s:.6e}" for e, s in zip(energies, sigma)]
    (OUT / name).write_text("\n".join(lines) + "\n")


def above(threshold, n=160):
    return np.concatenate([[threshold], threshold + np.geomspace(1e-2, 1000.0 - threshold, n)])


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    e = np.concatenate([[0.0], np.geomspace(1e-3, 1000.0, 241)])
    write("argon_elastic.txt", "e / Ar", "ELASTIC", 0.0, e, q_elastic(e),
          "argon momentum-transfer cross section, analytic approximation (stand-in, not a measured set)")
    e = above(EXC_TH)
    write("argon_excitation.txt", "e / Ar", "EXCITATION", EXC_TH, e, q_excitation(e),
          "argon lumped excitation (metastable), analytic approximation (stand-in, not a measured set)")
    e = above(ION_TH)
    write("argon_ionization.txt", "e / Ar", "IONIZATION", ION_TH, e, q_ionization(e),
          "argon ionization, analytic approximation (stand-in, not a measured set)")
    e = above(MET_ION_TH)
    write("argon_two_step_ionization.txt", "e / Ar*", "TWO_STEP_IONIZATION", MET_ION_TH, e,
          q_metastable_ionization(e), "metastable argon ionization, Lotz formula")


if __name__ == "__main__":
    main()
