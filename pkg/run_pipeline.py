#!/usr/bin/env python3
"""
CrossStateECG - Interactive Runner
Walks through synthesizing a dataset, running a scenario and verifying a probe
"""
import sys
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

DEFAULT_DATA = Path("data/synthetic")
DEFAULT_RUNS = Path("runs")


def check_requirements():
    """Check the scientific stack is importable"""
    print("Checking requirements...")
    try:
        import numpy  # noqa: F401
        import scipy  # noqa: F401
        import sklearn  # noqa: F401
        from crossstate_ecg.cli.main import main  # noqa: F401
    except ImportError as e:
        print(f"❌ Error: {e}")
        print("   Install dependencies with: pip install -r requirements.txt")
        return False
    print("✓ crossstate_ecg importable")
    return True


def ask(prompt, default):
    value = input(f"{prompt} (default: {default}): ").strip()
    return value or str(default)


def select_mode():
    """Interactive scenario selection"""
    from crossstate_ecg.models.schemas import SplitMode

    modes = list(SplitMode)
    print("\nAvailable scenarios:")
    for idx, mode in enumerate(modes, 1):
        print(f"  {idx}. {mode.value}")
    while True:
        choice = input(f"\nSelect scenario (1-{len(modes)}): ").strip()
        try:
            idx = int(choice) - 1
            if 0 <= idx < len(modes):
                return modes[idx].value
            print("Invalid choice")
        except ValueError:
            print("Please enter a number")


def run(argv):
    """Run one CLI command and report its exit code"""
    from crossstate_ecg.cli.main import main as cli_main

    print("\n$ crossstate-ecg " + " ".join(argv))
    code = cli_main(argv)
    print(f"\n{'✓' if code == 0 else '❌'} exit code {code}")
    return code


def synthesize():
    out = ask("Dataset directory", DEFAULT_DATA)
    subjects = ask("Subjects", 10)
    seconds = ask("Seconds per state", 300)
    return run(["synth", "--out", out, "--subjects", subjects, "--rest-sec", seconds, "--ex-sec", seconds])


def evaluate():
    data = ask("Dataset directory", DEFAULT_DATA)
    config = input("Config file (press Enter for defaults): ").strip()
    mode = select_mode()
    out = ask("Run directory", DEFAULT_RUNS / mode)
    argv = ["eval", "--data", data, "--mode", mode, "--out", str(Path(out) / "report.json")]
    if config:
        argv += ["--config", config]
    return run(argv)


def ablation():
    data = ask("Dataset directory", DEFAULT_DATA)
    out = ask("Run directory", DEFAULT_RUNS / "ablation")
    return run(["ablation", "--data", data, "--out", out])


def verify():
    gallery = ask("Gallery file", DEFAULT_RUNS / "rest2exercise" / "gallery.json")
    user = input("Claimed user: ").strip()
    probe = input("Probe (.ecg record or JSON embedding): ").strip()
    if not user or not probe:
        print("❌ User and probe are required")
        return 1
    return run(["verify", "--gallery", gallery, "--user", user, "--probe", probe])


def main():
    """Main interactive runner"""
    print("=" * 80)
    print("CROSSSTATE ECG - Interactive Runner")
    print("ECG biometrics across resting and post-exercise states")
    print("=" * 80)

    if not check_requirements():
        sys.exit(1)

    actions = {
        "1": ("Synthesize a dataset", synthesize),
        "2": ("Train and evaluate a scenario", evaluate),
        "3": ("Run the ablation series", ablation),
        "4": ("Verify a probe against a gallery", verify),
    }
    while True:
        print("\n" + "=" * 80)
        print("MAIN MENU")
        print("=" * 80)
        for key, (label, _) in actions.items():
            print(f"{key}. {label}")
        print("5. Exit")

        choice = input("\nSelect option (1-5): ").strip()
        if choice == "5":
            print("\n✓ Goodbye")
            return
        if choice not in actions:
            print("Invalid choice")
            continue
        try:
            actions[choice][1]()
        except KeyboardInterrupt:
            print("\n\n✓ Interrupted")
        input("\nPress Enter to continue...")


if __name__ == "__main__":
    main()
