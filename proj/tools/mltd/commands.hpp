#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mltd/error.hpp"
#include "run_config.hpp"

namespace mltd::cli {

/// Any failure reading or writing a checkpoint; maps to exit code 4.
class CheckpointFailure : public Error {
 public:
  using Error::Error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;
inline constexpr int kExitCheckpoint = 4;

/// Suite named by the config: a saved suite, a text corpus or the generator.
TaskSuite obtain_suite(const RunConfig& cfg);

struct GenTasksArgs {
  std::filesystem::path out;  // empty = <out_dir>/tasks
};
int cmd_gen_tasks(const RunConfig& cfg, const GenTasksArgs& args);

struct MetaTrainArgs {
  std::filesystem::path resume;
};
int cmd_meta_train(const RunConfig& cfg, const MetaTrainArgs& args);

struct AdaptArgs {
  std::filesystem::path checkpoint;
  std::vector<std::string> task_ids;
  std::string role = "meta_test";  // used when task_ids is empty
  long steps = -1;                 // < 0 = meta.inner_steps
  std::size_t train_size = 0;
  bool early_stop = false;
  std::filesystem::path output;
};
int cmd_adapt(const RunConfig& cfg, const AdaptArgs& args);

int cmd_compare(const RunConfig& cfg);
int cmd_rank_sweep(const RunConfig& cfg);

struct GradcheckArgs {
  std::vector<std::string> scopes;  // empty = every scope
  std::size_t seeds = 20;
};
int cmd_gradcheck(const RunConfig& cfg, const GradcheckArgs& args);

struct ParamsArgs {
  bool test_mode = false;
};
int cmd_params(const RunConfig& cfg, const ParamsArgs& args);

/// Model shaped like GPT-2 medium (24 layers, d 1024, 16 heads).
ModelConfig gpt2_medium();

}  // namespace mltd::cli
