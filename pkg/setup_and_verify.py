#!/usr/bin/env python3
"""
Setup and Verification Script for CrossStateECG
Checks installation and configuration, then runs a small smoke test
"""
import sys
import tempfile
from pathlib import Path


def print_header(text):
    """Print formatted header"""
    print("\n" + "=" * 80)
    print(f"  {text}")
    print("=" * 80)


def print_step(text, status=None):
    """Print step with status"""
    if status is None:
        print(f"\n{text}")
    elif status == "ok":
        print(f"✓ {text}")
    elif status == "error":
        print(f"✗ {text}")
    elif status == "warning":
        print(f"⚠ {text}")


def check_python_version():
    """Check Python version"""
    print_step("Checking Python version...")
    version = sys.version_info
    if version >= (3, 9):
        print_step(f"Python {version.major}.{version.minor}.{version.micro}", "ok")
        return True
    print_step(f"Python {version.major}.{version.minor} - Need 3.9+", "error")
    return False


def check_dependencies():
    """Check if all dependencies are installed"""
    print_step("Checking dependencies...")
    required = ["numpy", "scipy", "pandas", "pydantic", "dotenv", "sklearn", "pytest"]
    missing = []
    for package in required:
        try:
            __import__(package)
            print_step(package, "ok")
        except ImportError:
            print_step(f"{package} - NOT INSTALLED", "error")
            missing.append(package)
    if missing:
        print_step("Install missing packages with:", "warning")
        print("  pip install -r requirements.txt")
        return False
    return True


def check_env_file():
    """Check optional .env settings"""
    print_step("Checking environment configuration...")
    if not Path(".env").exists():
        print_step(".env not found, defaults apply (cp .env.example .env to customize)", "warning")
        return True
    from crossstate_ecg.utils.config import load_env

    load_env()
    print_step(".env loaded", "ok")
    return True


def check_project_structure():
    """Check if all required files exist"""
    print_step("Checking project structure...")
    required_paths = [
        "crossstate_ecg/cli/main.py",
        "crossstate_ecg/core/pipeline.py",
        "crossstate_ecg/core/preprocess.py",
        "crossstate_ecg/core/network.py",
        "crossstate_ecg/core/adaptive_auth.py",
        "crossstate_ecg/models/schemas.py",
        "requirements.txt",
        "pytest.ini",
    ]
    all_exist = True
    for path in required_paths:
        if Path(path).exists():
            print_step(path, "ok")
        else:
            print_step(f"{path} - MISSING", "error")
            all_exist = False
    return all_exist


def run_basic_test():
    """Synthesize a record, segment it and embed the segments with an untrained network"""
    print_step("Running basic functionality test...")
    try:
        from crossstate_ecg.core import data_io
        from crossstate_ecg.core.network import CrossStateNet
        from crossstate_ecg.core.preprocess import Preprocessor
        from crossstate_ecg.models.schemas import EcgState, ModelConfig

        with tempfile.TemporaryDirectory() as tmp:
            manifest = data_io.synth_dataset(2, rest_sec=20, ex_sec=0, seed=1, out_dir=tmp)
            record = data_io.read_record(Path(tmp) / manifest.records[0].path)
        segments, report = Preprocessor().run(record)
        if not segments or record.state != EcgState.REST:
            print_step("Preprocessing produced no segments", "error")
            return False
        print_step(f"Preprocessing: {report.n_passed}/{report.n_input} segments passed", "ok")

        config = ModelConfig(branch_kernels=[3, 5], branch_channels=4, deep_channels=[8, 16],
                             attention_reduction=4, embedding_dim=8, n_subjects=2)
        embeddings, _ = CrossStateNet(config, seed=0).eval().infer([s.samples for s in segments[:4]])
        print_step(f"Network forward pass: embeddings {embeddings.shape}", "ok")
        return True
    except Exception as e:
        print_step(f"Basic test failed: {e}", "error")
        return False


def print_next_steps():
    """Print next steps for the user"""
    print_header("SETUP COMPLETE!")
    print("\nNext steps:\n")
    print("1. Run the interactive runner:")
    print("   python run_pipeline.py\n")
    print("2. Or use the command line directly:")
    print("   python -m crossstate_ecg.cli.main synth --out data/synthetic")
    print("   python -m crossstate_ecg.cli.main eval --data data/synthetic --out runs/r2e/report.json\n")
    print("3. Run the tests:")
    print("   pytest            # fast suite")
    print("   pytest -m slow    # end-to-end training runs\n")
    print("4. Read the documentation:")
    print("   GETTING_STARTED.md - Quick start guide")
    print("   docs/README.md - Full documentation\n")
    print("=" * 80)


def main():
    """Main setup and verification"""
    print_header("CrossStateECG - Setup and Verification")

    checks = [
        ("Python Version", check_python_version),
        ("Dependencies", check_dependencies),
        ("Environment Config", check_env_file),
        ("Project Structure", check_project_structure),
        ("Basic Tests", run_basic_test),
    ]
    results = []
    for name, check_func in checks:
        print_header(name)
        results.append((name, check_func()))

    print_header("VERIFICATION SUMMARY")
    all_passed = True
    for name, result in results:
        print(f"{name:.<50} {'✓ PASSED' if result else '✗ FAILED'}")
        all_passed = all_passed and result

    if all_passed:
        print_next_steps()
        return 0
    print("\n⚠️  Some checks failed. Please resolve the issues above.")
    return 1


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\n✗ Setup cancelled by user")
        sys.exit(1)
