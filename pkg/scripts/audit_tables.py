"""Parameter-count table for every variant and size preset, plus the
reported-size reconciliation and the AdaLN sharing gap."""

import argparse
from pathlib import Path

from ditair.arch import SIZE_PRESETS, VARIANTS
from ditair.audit import adaln_sharing_delta, audit_preset, format_table, reconcile_overheads, reports_to_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, help="write audit.csv here")
    args = ap.parse_args()

    rows = [(size, audit_preset(v, size)) for v in VARIANTS for size in SIZE_PRESETS]
    print(format_table(rows))
    print()
    print("B-size reconciliation (reported total - formula total):")
    for v, r in reconcile_overheads().items():
        print(f"  {v:<24} formula {r['formula']:>13,}  reported {r['reported']:>13,}  overhead {r['overhead'] / 1e6:6.2f}M")
    print(f"\nper-layer minus shared AdaLN (MMDiT/B): {adaln_sharing_delta('B'):,}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "audit.csv").write_text(reports_to_csv(rows))
        print(f"wrote {args.out / 'audit.csv'}")


if __name__ == "__main__":
    main()
