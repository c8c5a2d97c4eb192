#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "disdet/dataset.hpp"
#include "disdet/evalmetrics.hpp"
#include "disdet/training.hpp"

namespace disdet {

/// Recognised variant names.
const std::vector<std::string>& ablation_variants();

/// Config of a named variant derived from `base`; throws on unknown names.
TrainConfig apply_variant(const TrainConfig& base, const std::string& variant);

struct AblationRow {
  std::string variant;
  TrainConfig config;
  std::vector<double> map_per_seed;

  double mean() const;
};

struct AblationData {
  const Dataset* source = nullptr;
  const Dataset* target = nullptr;
  const Dataset* eval = nullptr;  // target-domain split with sealed boxes
};

/// Trains every variant once per seed and scores the final checkpoint on
/// the evaluation split. Run directories go under `out_dir/<variant>/seed<s>`.
std::vector<AblationRow> ablate(const TrainConfig& base, const std::vector<std::string>& variants,
                                const std::vector<uint64_t>& seeds, const AblationData& data,
                                const std::filesystem::path& out_dir, bool verbose = false);

/// Stage / relation / layer check-mark columns followed by per-seed and mean mAP.
std::string format_ablation_table(const std::vector<AblationRow>& rows);
void write_ablation_csv(const std::filesystem::path& file, const std::vector<AblationRow>& rows);

}  // namespace disdet
