#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "uam/data_synth.hpp"

int main(int argc, char** argv) {
  CLI::App app{
      "writes a deterministic synthetic digit corpus in the standard MNIST "
      "IDX layout (train/t10k images and labels)"};

  std::string out_dir;
  uam::data::SyntheticConfig cfg;
  bool gzip = false;
  app.add_option("--out", out_dir, "output directory")->required();
  app.add_option("--seed", cfg.seed, "generator seed");
  app.add_option("--train", cfg.train_count, "training example count");
  app.add_option("--test", cfg.test_count, "test example count");
  app.add_option("--noise", cfg.noise_sigma, "pixel noise sigma");
  app.add_option("--shift", cfg.max_shift, "max translation jitter in pixels");
  app.add_flag("--gzip", gzip, "write .gz files");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto raw = uam::data::make_synthetic_mnist(cfg);
    uam::data::write_mnist_dir(raw, out_dir, gzip);
    std::printf("wrote %d train / %d test examples to %s\n", cfg.train_count,
                cfg.test_count, out_dir.c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
