#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "helpers.hpp"

using akd::testing::TempDir;
namespace fs = std::filesystem;

namespace {

const std::string kBinary = AKD_BINARY;
const fs::path kConfigs = AKD_CONFIG_DIR;

int run(const std::string& args, const fs::path& log) {
    const std::string cmd = kBinary + " " + args + " >" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kStageConfig = R"({
  "model": {"hidden_size": 8, "ffn_size": 16, "num_layers": 1, "num_heads": 2},
  "teacher_train": {"epochs": 1, "max_lr": 0.003, "warmup_steps": 5, "max_tokens": 256},
  "finetune": {"epochs": 1, "max_tokens": 256},
  "student_train": {"epochs": 1, "max_tokens": 256}
})";

}  // namespace

TEST_CASE("usage errors exit 2") {
    TempDir dir("cli-usage");
    CHECK(run("", dir / "log") == 2);
    CHECK(run("no-such-command", dir / "log") == 2);
    CHECK(run("gen-data", dir / "log") == 2);
    CHECK(run("pipeline --config " + (dir / "missing.jsonc").string(), dir / "log") == 2);
    write(dir / "bad.jsonc", "{\"name\": 3}");
    CHECK(run("gen-data --config " + (dir / "bad.jsonc").string(), dir / "log") == 2);
    CHECK(run("--temperature warm gen-data --config " + (kConfigs / "tiny.jsonc").string(), dir / "log") == 2);
    CHECK(run("--help", dir / "log") == 0);
}

TEST_CASE("gen-data is byte-identical across reruns") {
    TempDir dir("cli-gen");
    const auto cfg = (kConfigs / "tiny.jsonc").string();
    REQUIRE(run("gen-data --config " + cfg + " --out " + (dir / "a").string(), dir / "log") == 0);
    REQUIRE(run("gen-data --config " + cfg + " --out " + (dir / "b").string(), dir / "log") == 0);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir / "a")) {
        ++files;
        INFO(e.path().filename().string());
        CHECK(slurp(e.path()) == slurp(dir / "b" / e.path().filename()));
    }
    CHECK(files == 3 * 6 + 1);
    REQUIRE(run("--seed 2 gen-data --config " + cfg + " --out " + (dir / "c").string(), dir / "log") == 0);
    CHECK(slurp(dir / "a" / "lr.train.src") != slurp(dir / "c" / "lr.train.src"));
}

TEST_CASE("stage commands chain and bad inputs exit 3") {
    TempDir dir("cli-stage");
    const auto data = dir / "data";
    REQUIRE(run("gen-data --config " + (kConfigs / "tiny.jsonc").string() + " --out " + data.string(), dir / "log") ==
            0);
    write(dir / "stage.jsonc", kStageConfig);
    const std::string common = "--config " + (dir / "stage.jsonc").string() + " --out " + (dir / "m").string();
    const std::string vocab = " --vocab " + (data / "vocab.txt").string();
    const auto prefix = [&](const char* lang, const char* split) { return (data / lang).string() + "." + split; };

    REQUIRE(run(common + " train-teacher" + vocab + " --train " + prefix("near", "train") + " --dev " +
                    prefix("near", "dev") + " --name near",
                dir / "log") == 0);
    REQUIRE(run(common + " finetune --model " + (dir / "m" / "near.akdm").string() + vocab + " --train " +
                    prefix("lr", "train") + " --name near-ft",
                dir / "log") == 0);
    REQUIRE(run(common + " distill --teacher " + (dir / "m" / "near-ft.akdm").string() + " --teacher " +
                    (dir / "m" / "near.akdm").string() + vocab + " --train " + prefix("lr", "train") +
                    " --name student",
                dir / "log") == 0);
    CHECK(fs::exists(dir / "m" / "student.trace.csv"));
    CHECK(run("evaluate --model " + (dir / "m" / "student.akdm").string() + vocab + " --test " + prefix("lr", "test"),
              dir / "eval.json") == 0);
    CHECK(slurp(dir / "eval.json").find("\"bleu\"") != std::string::npos);
    CHECK(run("--out " + (dir / "plot").string() + " trace --trace " + (dir / "m" / "student.trace.csv").string(),
              dir / "log") == 0);
    CHECK(fs::exists(dir / "plot" / "student" / "trace_long.csv"));

    CHECK(run(common + " train-teacher" + vocab + " --train " + (dir / "nothing").string(), dir / "log") == 3);
    write(dir / "x.src", "a b\nc\n");
    write(dir / "x.tgt", "a\n");
    CHECK(run(common + " train-teacher" + vocab + " --train " + (dir / "x").string(), dir / "log") == 3);
    write(dir / "broken.akdm", "not a model");
    CHECK(run("evaluate --model " + (dir / "broken.akdm").string() + vocab + " --test " + prefix("lr", "test"),
              dir / "log") == 3);
    CHECK(run("trace --run " + dir.path().string(), dir / "log") == 3);
}

TEST_CASE("divergence exits 4 and keeps a checkpoint") {
    TempDir dir("cli-diverge");
    const auto data = dir / "data";
    REQUIRE(run("gen-data --config " + (kConfigs / "tiny.jsonc").string() + " --out " + data.string(), dir / "log") ==
            0);
    std::string cfg = kStageConfig;
    cfg.replace(cfg.find("\"max_lr\": 0.003"), 15, "\"max_lr\": 1e200");
    write(dir / "hot.jsonc", cfg);
    CHECK(run("--config " + (dir / "hot.jsonc").string() + " --out " + (dir / "m").string() + " train-teacher --vocab " +
                  (data / "vocab.txt").string() + " --train " + (data / "near").string() + ".train",
              dir / "log") == 4);
    CHECK(fs::exists(dir / "m" / "teacher.akdm"));
}
