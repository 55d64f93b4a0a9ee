#!/usr/bin/env python3
"""
Quick validation script to check that the project is properly configured:
packages, environment, directories and a tiny end-to-end distributed run.
"""

import sys
import os

def test_imports():
    """Test if all required packages are installed."""
    print("🔍 Testing imports...")

    try:
        import numpy
        import scipy
        import pandas
        from scipy.optimize import linear_sum_assignment
        from scipy.special import logsumexp
        print("✅ Numerical packages installed correctly")
    except ImportError as e:
        print(f"❌ Numerical import error: {e}")
        return False

    try:
        import langgraph
        from langgraph.graph import StateGraph
        import pydantic
        import dotenv
        print("✅ LangGraph, pydantic and python-dotenv installed correctly")
    except ImportError as e:
        print(f"❌ Import error: {e}")
        return False

    try:
        from app.services.transport import wasserstein_power, sinkhorn_divergence
        from app.services.kernel_distance import empirical_itd2
        from app.services.permtest import itd_permutation_test
        from app.services.synth import sample_model, sample_drift
        from app.protocol.coordinator import coordinator_run
        from app.tools.experiment_tool import run_type1
        print("✅ Project modules imported successfully")
    except ImportError as e:
        print(f"❌ Project import error: {e}")
        return False

    return True

def test_environment():
    """Check environment variables."""
    print("\n🔍 Testing environment configuration...")

    from app.config import ENV_PREFIX, get_settings
    settings = get_settings()

    overrides = sorted(k for k in os.environ if k.startswith(ENV_PREFIX))
    if overrides:
        print(f"✅ Environment overrides: {', '.join(overrides)}")
    else:
        print("ℹ️  No ITD_* overrides, using desk-scale defaults")
    print(f"   seed={settings.seed} K={settings.K} m={settings.m} n={settings.n} "
          f"Bk={settings.Bk} B={settings.B} reps={settings.reps}")

    return True

def test_directories():
    """Check if required directories exist."""
    print("\n🔍 Testing directory structure...")

    if os.path.isdir("data/grids"):
        print("✅ data/grids exists")
    else:
        print("❌ data/grids missing (grid presets)")
        return False

    from app.config import get_settings
    out = get_settings().out
    os.makedirs(out, exist_ok=True)
    print(f"✅ {out} ready")

    return True

def test_end_to_end():
    """Tiny loopback run must match the in-process test."""
    print("\n🔍 Testing a distributed run...")

    try:
        from app.protocol.channels import LoopbackTransport
        from app.protocol.coordinator import CoordinatorConfig, coordinator_run
        from app.protocol.registry import adverts_for
        from app.services.permtest import itd_permutation_test
        from app.services.synth import ModelConfig, sample_model

        clients = sample_model(ModelConfig(K=3, d=2, m=15, n=15, seed=7))
        config = CoordinatorConfig(K=3, B_k=10, B=50, seed=7)
        with LoopbackTransport.from_samples(clients) as transport:
            report = coordinator_run(config, transport, adverts_for(clients))
        reference = itd_permutation_test(clients, B_k=10, B=50, seed=7)

        if report == reference:
            print(f"✅ Loopback run matches in-process test (ITD^2={report.observed.value:.4g})")
            return True
        print("❌ Loopback run differs from the in-process test")
        return False

    except Exception as e:
        print(f"❌ Distributed run failed: {e}")
        return False

def main():
    """Run all tests."""
    print("=" * 60)
    print("🧪 ITD Two-Sample Testing Project Validation")
    print("=" * 60)

    tests = [
        ("Package Imports", test_imports),
        ("Environment Config", test_environment),
        ("Directory Structure", test_directories),
        ("Distributed Run", test_end_to_end),
    ]

    results = []
    for test_name, test_func in tests:
        try:
            result = test_func()
            results.append(result)
        except Exception as e:
            print(f"❌ {test_name} crashed: {e}")
            results.append(False)

    print("\n" + "=" * 60)
    print("📊 Test Results")
    print("=" * 60)

    passed = sum(results)
    total = len(results)

    print(f"Passed: {passed}/{total}")

    if all(results):
        print("\n🎉 All tests passed! Project is properly configured.")
        print("\n🚀 You can now run:")
        print("   python main.py type1 --grid type1.json   # Type I error table")
        print("   python main.py coordinate --verify       # One distributed test")
        print("   pytest                                   # Test suite")
    else:
        print("\n⚠️  Some tests failed. Please check the errors above.")
        print("\n💡 Common fixes:")
        print("   pip install -r requirements.txt")
        print("   cp .env.example .env")
        return 1

    return 0

if __name__ == "__main__":
    sys.exit(main())
