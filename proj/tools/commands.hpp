#pragma once

#include <string>

#include "run_config.hpp"

namespace functakit::cli {

// One function per subcommand. Path arguments fall back to the [invocation]
// entries of a replayed snapshot when the flag is empty; every command writes
// <out>/resolved.ini before doing any work.

void cmd_meta_train(RunConfig cfg, std::string data_dir, int synth_count);
void cmd_encode(RunConfig cfg, std::string state_path, std::string data_dir,
                std::string labels_csv, int synth_count);
void cmd_decode(RunConfig cfg, std::string state_path, std::string set_path,
                int index, std::string png_path, int resolution);
void cmd_psnr(RunConfig cfg, std::string a_path, std::string b_path);
void cmd_quantize(RunConfig cfg, std::string set_path);
void cmd_perturb(RunConfig cfg, std::string state_path, std::string set_path,
                 int index, bool spatial, bool rank);
void cmd_classify(RunConfig cfg, std::string set_path, std::string eval_path);
void cmd_diffuse_train(RunConfig cfg, std::string set_path);
void cmd_sample(RunConfig cfg, std::string model_path, std::string ref_path,
                std::string state_path, int label);
void cmd_audit(RunConfig cfg, std::string samples_path, std::string train_path,
               std::string state_path, long long n, long long k);

}  // namespace functakit::cli
