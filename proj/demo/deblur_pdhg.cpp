// Solves one TV deblurring instance with PDHG and with the two-relaxation
// solver and prints the objective gap after a few depths.

#include <cstdio>

#include "proxforge/proxforge.hpp"

using namespace proxforge;

int main() {
  FamilyConfig cfg;
  cfg.family = Family::deblur;
  cfg.side = 32;
  const Dataset data = make_dataset(cfg, 1, 7);
  const ProblemInstance& inst = data.instances.front();
  const double L = data.ops.stacked_norm;
  const ReferenceOptimum ref = reference_solve(inst, L, kBenchReferenceIterations);
  std::printf("reference value %.6f (residual %.2e after %zu iterations)\n", ref.value,
              ref.residual, ref.iterations);

  const double s = 0.95 / L;
  const SchemeMatrices pdhg = preset_pdhg(s, s, 1.0);
  const SchemeMatrices relaxed = preset_new_solver(s, s, 1.5, 1.2);
  for (std::size_t depth : {10, 50, 200}) {
    std::printf("depth %4zu  pdhg gap %.4e  relaxed gap %.4e\n", depth,
                evaluate_method(inst, pdhg, depth, ref), evaluate_method(inst, relaxed, depth, ref));
  }
}
