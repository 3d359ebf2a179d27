#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "functakit/image.hpp"
#include "run_config.hpp"

using namespace functakit;
using namespace functakit::cli;
namespace fsys = std::filesystem;

namespace {

std::string test_dir() {
  const auto dir = fsys::temp_directory_path() / "functakit_cli_tests";
  fsys::create_directories(dir);
  return dir.string();
}

// exit code of the real binary; stdout/stderr routed to a scratch file
int run_cli(const std::string& args) {
  const std::string cmd = std::string(FUNCTAKIT_BIN) + " " + args + " > " +
                          test_dir() + "/last_output.txt 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string last_output() { return read_file(test_dir() + "/last_output.txt"); }

}  // namespace

TEST_CASE("config defaults survive a render/parse round trip") {
  const RunConfig cfg;
  const RunConfig back = parse_run_config(cfg.render());
  CHECK(back.render() == cfg.render());
  CHECK(back.seed == 0);
  CHECK(back.meta_spec.latent.rank == 1);
  CHECK(back.meta_spec.latent.c == 64);
  CHECK(back.classify.width == 64);
  CHECK(back.timesteps == 100);
}

TEST_CASE("config keys parse into the module structs") {
  RunConfig cfg = parse_run_config(
      "seed = 42\n"
      "output_dir = custom\n"
      "# a comment\n"
      "; another comment\n"
      "[meta]\n"
      "latent = spatial\n"
      "latent_s = 4\n"
      "latent_c = 8\n"
      "map = conv3x3\n"
      "interp = bilinear\n"
      "coords = per_patch\n"
      "resolution = 16\n"
      "inner_lr_init = 0.25\n"
      "first_order = true\n"
      "[classify]\n"
      "arch = transformer\n"
      "heads = 2\n"
      "train_frac = 0.75\n"
      "[diffuse]\n"
      "schedule = linear\n"
      "timesteps = 50\n"
      "guidance = 2.5\n"
      "[eval]\n"
      "strengths = 0, 0.1, 0.2\n"
      "clamp = false\n");
  CHECK(cfg.seed == 42);
  CHECK(cfg.output_dir == "custom");
  CHECK(cfg.meta_spec.latent == LatentShape::spatial(4, 8));
  CHECK(cfg.meta_spec.map_kind == MapKind::kConv3x3);
  CHECK(cfg.meta_spec.interp == InterpScheme::kBilinear);
  CHECK(cfg.meta_spec.coords == CoordScheme::kPerPatch);
  CHECK(cfg.meta_spec.resolution == 16);
  CHECK(cfg.meta_cfg.inner_lr_init == 0.25f);
  CHECK(cfg.meta_cfg.first_order);
  CHECK(cfg.classify.arch == ClassifierArch::kTokenTransformer);
  CHECK(cfg.classify.heads == 2);
  CHECK(cfg.classify_train_frac == 0.75f);
  CHECK(cfg.schedule == ScheduleKind::kLinear);
  CHECK(cfg.timesteps == 50);
  CHECK(cfg.guidance == 2.5);
  CHECK(cfg.strengths == std::vector<float>({0.0f, 0.1f, 0.2f}));
  CHECK_FALSE(cfg.perturb_clamp);

  // a non-default config also round-trips
  CHECK(parse_run_config(cfg.render()).render() == cfg.render());
}

TEST_CASE("config rejects unknown names, duplicates, and bad values") {
  CHECK_THROWS_AS(parse_run_config("[nosuch]\nkey = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[meta]\nnonsense = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("bogus_global = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[meta]\nwidth = 8\nwidth = 9\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[meta]\nwidth = eight\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[meta]\nwidth = 8.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[meta]\nfirst_order = yes\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[meta]\nlatent = grid\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[meta]\nwidth\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[meta\nwidth = 8\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("seed = -3\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[eval]\nstrengths = \n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[classify]\ntrain_frac = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("threads = 0\n"), ConfigError);
}

TEST_CASE("assignments use the same validation as the file parser") {
  RunConfig cfg;
  apply_assignment(cfg, "quantize.bits=5");
  CHECK(cfg.quant_bits == 5);
  apply_assignment(cfg, "seed=11");
  CHECK(cfg.seed == 11);
  apply_assignment(cfg, "diffuse.dummy_prop=0.4");
  CHECK(cfg.ddpm.dummy_prop == 0.4f);
  CHECK_THROWS_AS(apply_assignment(cfg, "quantize.bits"), ConfigError);
  CHECK_THROWS_AS(apply_assignment(cfg, "quantize.nope=1"), ConfigError);
}

TEST_CASE("invocation entries are preserved for replay") {
  RunConfig cfg;
  const std::string text = cfg.render({{"command", "encode"}, {"state", "a.sfck"}});
  const RunConfig back = parse_run_config(text);
  CHECK(back.invocation.at("command") == "encode");
  CHECK(back.invocation.at("state") == "a.sfck");
}

TEST_CASE("binary: psnr of an image with itself prints the inf sentinel") {
  const std::string dir = test_dir();
  ImageData img;
  img.width = img.height = 4;
  img.channels = 3;
  img.pixels = MatXf::Zero(3, 16);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i)
    img.pixels.data()[i] = static_cast<float>((i * 37 % 256)) / 255.0f;
  save_png(img, dir + "/same.png");

  const int code = run_cli("psnr --a " + dir + "/same.png --b " + dir +
                           "/same.png --out " + dir + "/psnr_run");
  CHECK(code == 0);
  CHECK(last_output().find("psnr: inf") != std::string::npos);
  CHECK(read_file(dir + "/psnr_run/psnr.txt") == "inf\n");
}

TEST_CASE("binary: categorized exit codes") {
  const std::string dir = test_dir();
  SUBCASE("missing artifact is an io error") {
    const int code = run_cli("encode --state " + dir + "/does_not_exist.sfck" +
                             " --synth 2 --out " + dir + "/err_run" +
                             " -D meta.resolution=4");
    CHECK(code == 3);
    CHECK(last_output().find("error [io]") != std::string::npos);
  }
  SUBCASE("unknown config key is a config error") {
    const int code =
        run_cli("meta-train --synth 2 -D meta.bogus=1 --out " + dir + "/err_run");
    CHECK(code == 2);
    CHECK(last_output().find("error [config]") != std::string::npos);
  }
  SUBCASE("missing data source is a config error") {
    const int code = run_cli("meta-train --out " + dir + "/err_run");
    CHECK(code == 2);
  }
}

TEST_CASE("binary: identical config and seed give byte-identical metrics") {
  const std::string dir = test_dir();
  const std::string ini = dir + "/repro.ini";
  {
    std::ofstream os(ini);
    os << "seed = 5\n[meta]\nwidth = 6\ndepth = 3\nout_dim = 3\n"
       << "latent = vector\nlatent_c = 8\nresolution = 6\n"
       << "iterations = 8\nbatch_size = 2\nlog_every = 2\n";
  }
  REQUIRE(run_cli("meta-train --config " + ini + " --synth 3 --threads 1 --out " +
                  dir + "/runA") == 0);
  REQUIRE(run_cli("meta-train --config " + ini + " --synth 3 --threads 1 --out " +
                  dir + "/runB") == 0);
  CHECK(read_file(dir + "/runA/meta_metrics.csv") ==
        read_file(dir + "/runB/meta_metrics.csv"));
  CHECK(read_file(dir + "/runA/meta.sfck") == read_file(dir + "/runB/meta.sfck"));

  SUBCASE("and the snapshot replays the run exactly") {
    REQUIRE(run_cli("meta-train --config " + dir + "/runA/resolved.ini --out " +
                    dir + "/runC") == 0);
    CHECK(read_file(dir + "/runA/meta_metrics.csv") ==
          read_file(dir + "/runC/meta_metrics.csv"));
  }
}

TEST_CASE("binary: encode/decode/quantize chain stays under the run directory") {
  const std::string dir = test_dir();
  const std::string ini = dir + "/chain.ini";
  {
    std::ofstream os(ini);
    os << "seed = 9\n[meta]\nwidth = 6\ndepth = 3\nout_dim = 3\n"
       << "latent = vector\nlatent_c = 8\nresolution = 6\n"
       << "iterations = 4\nbatch_size = 2\n";
  }
  REQUIRE(run_cli("meta-train --config " + ini + " --synth 3 --out " + dir +
                  "/chainA") == 0);
  REQUIRE(run_cli("encode --config " + ini + " --state " + dir +
                  "/chainA/meta.sfck --synth 3 --out " + dir + "/chainB") == 0);
  CHECK(fsys::exists(dir + "/chainB/functaset.sfta"));
  CHECK(fsys::exists(dir + "/chainB/encode_psnr.csv"));
  REQUIRE(run_cli("decode --state " + dir + "/chainA/meta.sfck --set " + dir +
                  "/chainB/functaset.sfta --index 0 --out " + dir + "/chainC") == 0);
  CHECK(fsys::exists(dir + "/chainC/decode_0.png"));
  REQUIRE(run_cli("quantize --set " + dir + "/chainB/functaset.sfta --bits 6 "
                  "--out " + dir + "/chainD") == 0);
  CHECK(fsys::exists(dir + "/chainD/quantized.sfta"));

  // quantize must not touch its input
  const std::string before = read_file(dir + "/chainB/functaset.sfta");
  CHECK(read_file(dir + "/chainB/functaset.sfta") == before);
  REQUIRE(run_cli("perturb --state " + dir + "/chainA/meta.sfck --set " + dir +
                  "/chainD/quantized.sfta --strengths 0,0.1 --out " + dir +
                  "/chainE") == 0);
  CHECK(fsys::exists(dir + "/chainE/perturb.csv"));
  const std::string csv = read_file(dir + "/chainE/perturb.csv");
  CHECK(csv.rfind("strength,mae,rmse\n0,0,0\n", 0) == 0);  // strength 0 is exact
}
