#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mvit/io.hpp"

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
    if (const char* env = std::getenv("MV2_CLI")) return env;
    return "build/tools/multivit2";
}

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

RunResult run_cli(const std::string& args, const fs::path& scratch) {
    fs::path out_file = scratch / "stdout.txt";
    fs::path err_file = scratch / "stderr.txt";
    std::string cmd = cli_path() + " " + args + " > " + out_file.string() + " 2> " +
                      err_file.string();
    int rc = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WEXITSTATUS(rc);
    r.out = mvit::read_text_file(out_file.string());
    r.err = mvit::read_text_file(err_file.string());
    return r;
}

fs::path make_scratch() {
    fs::path p = fs::temp_directory_path() / "mvit_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string tiny_config(const fs::path& dir, const std::string& extra = "") {
    std::string body = R"({
  "preset": "desk",
  "dims": [12, 14, 12],
  "components": 8,
  "n_subjects": 20,
  "ae_channels": [4, 8],
  "latent_channels": 4,
  "ae_epochs": 1,
  "diffusion_T": 6,
  "diffusion_steps": 5,
  "diffusion_batch": 4,
  "denoiser_hidden": 8,
  "embed_dim": 16,
  "vit_layers": 1,
  "heads": 2,
  "mlp_hidden": 16,
  "latent_patch": [1, 2, 1],
  "vol_patch": [6, 7, 6],
  "cls_epochs": 1,
  "cls_batch": 8,
  "warmup_epochs": 1,
  "seed": 7
)" + extra + "\n}";
    fs::path cfg = dir / "config.json";
    mvit::write_text_file(cfg.string(), body);
    return cfg.string();
}

}  // namespace

TEST_CASE("cli pipeline end to end at tiny scale") {
    fs::path scratch = make_scratch();
    fs::path out = scratch / "run";
    std::string cfg = tiny_config(scratch);
    std::string base = "--config " + cfg + " --out " + out.string() + " ";

    // upstream artifact checks fire before any work happens
    auto no_manifest = run_cli(base + "pretrain-ae", scratch);
    CHECK(no_manifest.exit_code == 2);
    CHECK(no_manifest.err.find("synth-data") != std::string::npos);

    auto synth = run_cli(base + "synth-data", scratch);
    CHECK(synth.exit_code == 0);
    CHECK(fs::exists(out / "manifest.json"));

    auto no_ae = run_cli(base + "train-ldm", scratch);
    CHECK(no_ae.exit_code == 2);
    CHECK(no_ae.err.find("pretrain-ae") != std::string::npos);

    CHECK(run_cli(base + "pretrain-ae", scratch).exit_code == 0);
    CHECK(fs::exists(out / "ae.ckpt"));
    CHECK(fs::exists(out / "ae_loss.csv"));

    CHECK(run_cli(base + "train-ldm", scratch).exit_code == 0);
    CHECK(fs::exists(out / "ldm_c0.ckpt"));
    CHECK(fs::exists(out / "ldm_c1.ckpt"));

    CHECK(run_cli(base + "augment", scratch).exit_code == 0);
    CHECK(fs::exists(out / "augmented" / "manifest.json"));

    auto train = run_cli(base + "train", scratch);
    CHECK(train.exit_code == 0);
    CHECK(fs::exists(out / "classifier_MultiViT2_fold0.ckpt"));
    CHECK(fs::exists(out / "metrics_MultiViT2.csv"));
    CHECK(train.out.find("fold,accuracy,auc") != std::string::npos);

    auto eval = run_cli(base + "evaluate --checkpoint " +
                            (out / "classifier_MultiViT2_fold0.ckpt").string(),
                        scratch);
    CHECK(eval.exit_code == 0);
    auto ej = nlohmann::json::parse(eval.out);
    CHECK(ej["fold"] == 0);
    // the report's config hash comes from the checkpoint it evaluated
    auto stage_cfg = nlohmann::json::parse(
        mvit::read_text_file((out / "train_config.json").string()));
    CHECK(ej["config_hash"] == stage_cfg["config_hash"]);

    auto sal = run_cli(base + "saliency --checkpoint " +
                           (out / "classifier_MultiViT2_fold1.ckpt").string(),
                       scratch);
    CHECK(sal.exit_code == 0);
    CHECK(fs::exists(out / "saliency" / "summary.json"));
    auto sj = nlohmann::json::parse(
        mvit::read_text_file((out / "saliency" / "summary.json").string()));
    CHECK(sj["subjects"].size() == 4);  // 20 subjects / 5 folds
}

TEST_CASE("cli synth-data is byte-idempotent") {
    fs::path scratch = make_scratch();
    std::string cfg = tiny_config(scratch);
    fs::path out1 = scratch / "a", out2 = scratch / "b";
    CHECK(run_cli("--config " + cfg + " --out " + out1.string() + " synth-data", scratch)
              .exit_code == 0);
    CHECK(run_cli("--config " + cfg + " --out " + out2.string() + " synth-data", scratch)
              .exit_code == 0);
    CHECK(mvit::read_text_file((out1 / "manifest.json").string()) ==
          mvit::read_text_file((out2 / "manifest.json").string()));
    CHECK(mvit::read_text_file((out1 / "data" / "subj-00000_vol.raw").string()) ==
          mvit::read_text_file((out2 / "data" / "subj-00000_vol.raw").string()));
}

TEST_CASE("cli matrix emits the grid table and is deterministic") {
    fs::path scratch = make_scratch();
    std::string cfg = tiny_config(scratch);
    fs::path out = scratch / "m";
    std::string base = "--config " + cfg + " --out " + out.string() + " ";
    REQUIRE(run_cli(base + "synth-data", scratch).exit_code == 0);
    auto m1 = run_cli(base + "matrix", scratch);
    CHECK(m1.exit_code == 0);
    std::string csv = mvit::read_text_file((out / "matrix.csv").string());
    CHECK(csv.rfind("Name,Main Model,Data,LFFM,Augmented,Accuracy,AUC\n", 0) == 0);
    int lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    CHECK(lines == 6);  // header + 5 rows
    CHECK(csv.find("Baseline1,ViT,MRI,-,-") != std::string::npos);
    CHECK(csv.find("Baseline2,MultiViT,MRI/FNC,No,No") != std::string::npos);
    CHECK(csv.find("Ablation1,CNN/ViT,MRI/FNC,No,Yes") != std::string::npos);
    CHECK(csv.find("Ablation2,CNN/ViT,MRI/FNC,Yes,No") != std::string::npos);
    CHECK(csv.find("MultiViT2,MultiViT2,MRI/FNC,Yes,Yes") != std::string::npos);

    auto m2 = run_cli(base + "matrix", scratch);
    CHECK(m2.exit_code == 0);
    CHECK(mvit::read_text_file((out / "matrix.csv").string()) == csv);
}

TEST_CASE("cli error paths: bad config, unwritable output") {
    fs::path scratch = make_scratch();
    mvit::write_text_file((scratch / "bad.json").string(), "{\"no_such_key\": 1}");
    auto bad = run_cli("--config " + (scratch / "bad.json").string() + " synth-data",
                       scratch);
    CHECK(bad.exit_code == 1);
    CHECK(bad.err.find("no_such_key") != std::string::npos);

    std::string cfg = tiny_config(scratch);
    auto unwritable =
        run_cli("--config " + cfg + " --out /dev/null/nested synth-data", scratch);
    CHECK(unwritable.exit_code != 0);

    mvit::write_text_file((scratch / "odd.json").string(),
                          "{\"n_subjects\": 21}");
    auto odd = run_cli("--config " + (scratch / "odd.json").string() + " synth-data",
                       scratch);
    CHECK(odd.exit_code == 1);
}

TEST_CASE("cli seed override changes outputs, preset selects profiles") {
    fs::path scratch = make_scratch();
    std::string cfg = tiny_config(scratch);
    fs::path out1 = scratch / "s1", out2 = scratch / "s2";
    REQUIRE(run_cli("--config " + cfg + " --out " + out1.string() + " synth-data", scratch)
                .exit_code == 0);
    REQUIRE(run_cli("--config " + cfg + " --seed 8 --out " + out2.string() + " synth-data",
                    scratch)
                .exit_code == 0);
    CHECK(mvit::read_text_file((out1 / "data" / "subj-00000_vol.raw").string()) !=
          mvit::read_text_file((out2 / "data" / "subj-00000_vol.raw").string()));
}
