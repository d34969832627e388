#!/usr/bin/env python3
"""
Model and Configuration Diagnostics Script

Prints what the solver will see for a model or run config: validation
findings, per-line claim intensities, the subset weights of one event,
the premiums of the identity contract and, for a run config, the size of
the candidate set and which search will handle it.
"""

import argparse
import sys
from pathlib import Path

from dotenv import dotenv_values

from band_reinsurance_errors import BandReinsuranceError
from band_solver import default_x_max
from reinsurance_contracts import count_candidates, line_candidates
from run_config import get_config, load_model_file
from thinning_model import (ThinningModel, gross_mean, line_claim_intensity, line_claim_weights, model_fingerprint,
                            validate)


def show_model(model: ThinningModel, top: int = 10):
    print(f"\n🔍 Model: {model.label}  ({model.m} classes, {model.n} lines)")
    print("=" * 60)
    print(f"   Fingerprint: {model_fingerprint(model)}")
    print(f"   β = {model.beta_total:g}   η = {model.eta:g}   η₁ = {model.eta1:g}   δ = {model.delta:g}")

    violations = validate(model)
    if violations:
        print("\n❌ Validation findings:")
        for issue in violations:
            print(f"   - {issue}")
        return
    print("✅ Model passes validation")

    print("\n📋 Lines:")
    intensity = line_claim_intensity(model)
    for z, law in enumerate(model.severities):
        print(f"   line {z}: λ = {intensity[z]:.4f}   severity {law.describe()}   mean {law.mean():.4f}")

    weights = line_claim_weights(model)
    ranked = sorted(weights.items(), key=lambda item: item[1], reverse=True)
    print(f"\n📊 Lines hit by one event (top {min(top, len(ranked))} of {len(ranked)}):")
    for subset, weight in ranked[:top]:
        label = "{" + ", ".join(str(z) for z in sorted(subset)) + "}" if subset else "none"
        print(f"   {label:<16} {weight:.6f}")

    mu = gross_mean(model)
    p = (1.0 + model.eta) * model.beta_total * mu
    print("\n💰 Identity contract:")
    print(f"   E(Y) = {mu:.6f}")
    print(f"   gross premium p = {p:.6f}, reinsurance premium q = 0, net premium = {p:.6f}")
    print(f"   V envelope at 0: [{p / (model.beta_total + model.delta):.4f}, {p / model.delta:.4f}]")
    print(f"   default x_max = {default_x_max(model):.2f}")

    # net premium left when every line is fully ceded
    ceded = p - (1.0 + model.eta1) * model.beta_total * mu
    print(f"   net premium with everything ceded: {ceded:.6f}{'  (infeasible)' if ceded <= 0 else ''}")


def show_config(path: Path):
    config = get_config(path)
    model = config.load_model()
    show_model(model)

    per_line = line_candidates(config.grid, config.families)
    total = count_candidates(per_line, config.shared)
    print(f"\n🔧 Contracts: {config.contract_mode}, families {', '.join(f.value for f in config.families)}")
    print(f"   candidates per line: {', '.join(str(len(c)) for c in per_line)}")
    print(f"   candidate vectors: {total} (cap {config.candidate_cap})")
    print(f"   search: {'dense' if total <= config.candidate_cap else 'coordinate descent'}"
          f"{' with local refinement' if config.refine else ''}")
    x_max = config.x_max if config.x_max is not None else default_x_max(model)
    print(f"   grid: h = {config.h:g}, x_max = {x_max:g} ({int(round(x_max / config.h)) + 1} points)")
    print(f"   config hash: {config.config_hash()}")


def main() -> int:
    """Main diagnostic function"""
    parser = argparse.ArgumentParser(description='Model and run configuration diagnostics')
    parser.add_argument('path', help='Model file (BETA=...) or run config (MODEL_FILE=...)')
    args = parser.parse_args()

    print("Band Reinsurance Diagnostics")
    print("=" * 50)
    path = Path(args.path)
    try:
        if 'MODEL_FILE' in dotenv_values(path):
            show_config(path)
        else:
            show_model(load_model_file(path))
    except BandReinsuranceError as e:
        print(f"\n❌ Error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
