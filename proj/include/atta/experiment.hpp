#pragma once

#include <string>
#include <vector>

#include "atta/adapt.hpp"
#include "atta/metrics.hpp"
#include "atta/scene.hpp"

namespace atta {

// Closed registry of evaluation methods. Each entry is a full adaptation
// configuration; "frozen" is the identity configuration.
struct MethodSpec {
    std::string name;
    std::string description;
    AdaptConfig config;
};

const std::vector<MethodSpec>& method_registry();
const MethodSpec* find_method(const std::string& name);
std::vector<std::string> registry_names();

struct SplitEval {
    EvalReport report;
    double mean_ms = 0.0;
    double median_ms = 0.0;
};

// Runs one method over one list of scenes (episodically in parallel, or
// sequentially for continue mode) and pools pixels for the aggregate report.
SplitEval evaluate_method(const ModelCheckpoint& ckpt, const std::vector<LoadedScene>& scenes,
                          const AdaptConfig& config);

struct EvalOptions {
    std::string data_dir;      // may contain "{seed}"
    std::string model_prefix;  // may contain "{seed}"
    std::string out_dir;
    std::vector<std::string> methods = {"frozen", "atta"};
    std::vector<std::string> splits = {"clean", "corrupt"};
    std::vector<uint64_t> seeds = {0};
    ScoreKind score = ScoreKind::energy;
};

struct AblateOptions {
    std::string data_dir;
    std::string model_prefix;
    std::string out_dir;
    std::vector<uint64_t> seeds = {0};
    ScoreKind score = ScoreKind::energy;
};

// Writes results.csv, details.json, per-method histogram CSVs and
// run_record.json under out_dir. All files are written atomically.
void run_eval(const EvalOptions& opts);

// Fixed variant sweep over the whole registry plus a Markdown summary of the
// module on/off grid.
void run_ablate(const AblateOptions& opts);

uint64_t config_hash(const std::string& canonical_json);
std::string substitute_seed(const std::string& pattern, uint64_t seed);

}  // namespace atta
