#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "hyperpeft/config.hpp"

namespace hyperpeft::cli {

struct Invocation {
  std::string command;
  RunConfig config;
  std::vector<std::string> argv;  // for the manifest
  int gradcheck_coords = 256;
};

// Each command writes its artifacts under config.io.out_dir plus a
// manifest.json and returns the process exit code. Exceptions propagate.
int cmd_synth_data(const Invocation& inv, std::ostream& out);
int cmd_hyperpretrain(const Invocation& inv, std::ostream& out);
int cmd_mtf(const Invocation& inv, std::ostream& out);
int cmd_peft_finetune(const Invocation& inv, std::ostream& out);
int cmd_eval(const Invocation& inv, std::ostream& out);
int cmd_gen_adapter(const Invocation& inv, std::ostream& out);
int cmd_gradcheck(const Invocation& inv, std::ostream& out);

// HYPERPEFT_THREADS, clamped to [1, hardware threads]; 1 when unset.
int worker_threads();

}  // namespace hyperpeft::cli
