#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ugs/decoder.hpp"
#include "ugs/eval.hpp"
#include "ugs/hierarchy.hpp"
#include "ugs/label_io.hpp"

namespace ugs {

// Every tunable the subcommands read, with defaults.
struct CliConfig {
    PipelineConfig pipeline;
    BenchmarkConfig benchmark;
    std::size_t max_dets = 1000;
    double conf_floor = 0.0;
    TrainConfig train;
    std::uint64_t seed = 0;
    int jobs = 1;
};

CliConfig default_cli_config();

// Resolved configuration as JSON; the same schema is accepted by --config.
Json config_to_json(const CliConfig& cfg);

// Applies the keys present in `j` on top of `cfg`; unknown keys are rejected.
void apply_config_json(CliConfig& cfg, const Json& j);

// Parses argv and runs the chosen subcommand. Reports go to `out`; the config echo,
// progress and error JSON go to `err`. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ugs
