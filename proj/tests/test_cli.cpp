#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "mads/profiles.hpp"
#include "mads/sha256.hpp"
#include "testutil.hpp"

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
    const std::string cmd = std::string(MADS_CLI_PATH) + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    RunResult result;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (fgets(buf.data(), buf.size(), pipe) != nullptr) result.output += buf.data();
    int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

// Content hash of every regular file under a directory, in sorted order.
std::string tree_hash(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir))
        if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    std::string blob;
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        std::ostringstream s;
        s << in.rdbuf();
        blob += f.lexically_relative(dir).string() + "\x1f" + s.str() + "\x1e";
    }
    return mads::sha256_hex(blob);
}

}  // namespace

TEST_CASE("profiles round trip and ship the documented defaults") {
    using mads::profiles::RunProfile;
    for (const char* name : {"synthetic", "awa2-like", "cub-like", "flo-like"}) {
        testutil::TempDir tmp("cli-profile");
        RunProfile p = RunProfile::builtin(name);
        p.save(tmp.path / "p.json");
        RunProfile loaded = RunProfile::load(tmp.path / "p.json");
        CHECK(loaded.name == p.name);
        CHECK(loaded.model.r == p.model.r);
        CHECK(loaded.model.k_queries == p.model.k_queries);
        CHECK(loaded.train.lr == p.train.lr);
        CHECK(loaded.train.warmup_epochs == p.train.warmup_epochs);
        CHECK(loaded.train.weights.lambda_local == p.train.weights.lambda_local);
    }
    auto awa2 = RunProfile::builtin("awa2-like");
    CHECK(awa2.model.r == 256);
    CHECK(awa2.model.k_queries == 4);
    CHECK(awa2.train.weights.lambda_local == 0.2);
    CHECK(awa2.train.weights.lambda_focus == 0.5);
    CHECK(awa2.train.weight_decay == 0.05);
    CHECK(awa2.train.batch_size == 64);
    CHECK(awa2.train.epochs == 40);
    auto cub = RunProfile::builtin("cub-like");
    CHECK(cub.model.r == 128);
    CHECK(cub.train.warmup_epochs == 3);
    auto flo = RunProfile::builtin("flo-like");
    CHECK(flo.model.k_queries == 8);
    CHECK_THROWS_AS(RunProfile::builtin("nope"), mads::ConfigError);

    // shipped profile files stay in sync with the built-ins
    const std::filesystem::path assets = std::filesystem::path(MADS_SOURCE_DIR) / "assets";
    for (const char* name : {"synthetic", "awa2-like", "cub-like", "flo-like"}) {
        RunProfile shipped = RunProfile::load(assets / "profiles" / (std::string(name) + ".json"));
        RunProfile builtin = RunProfile::builtin(name);
        CHECK(shipped.model.r == builtin.model.r);
        CHECK(shipped.model.dropout == builtin.model.dropout);
        CHECK(shipped.train.lr == builtin.train.lr);
        CHECK(shipped.train.weights.lambda_local == builtin.train.weights.lambda_local);
    }
}

TEST_CASE("--help enumerates the flags and unknown flags are hard errors") {
    auto help = run_cli("train --help");
    CHECK(help.exit_code == 0);
    for (const char* flag : {"--profile", "--seed", "--gamma", "--beta", "--lambda-focus",
                             "--lambda-local", "--k-queries", "--out-dir", "--cache-dir",
                             "--mock-llm"})
        CHECK(help.output.find(flag) != std::string::npos);

    auto unknown = run_cli("train --no-such-flag");
    CHECK(unknown.exit_code != 0);
}

TEST_CASE("gen-synthetic with equal seeds produces identical artifact hashes") {
    testutil::TempDir tmp("cli-gen");
    auto a = run_cli("gen-synthetic --seed 7 --out-dir " + (tmp.path / "a").string());
    REQUIRE(a.exit_code == 0);
    auto b = run_cli("gen-synthetic --seed 7 --out-dir " + (tmp.path / "b").string());
    REQUIRE(b.exit_code == 0);
    CHECK(tree_hash(tmp.path / "a") == tree_hash(tmp.path / "b"));

    auto c = run_cli("gen-synthetic --seed 8 --out-dir " + (tmp.path / "c").string());
    REQUIRE(c.exit_code == 0);
    CHECK(tree_hash(tmp.path / "a") != tree_hash(tmp.path / "c"));
}

TEST_CASE("eval without a checkpoint fails with a machine-parsable record") {
    testutil::TempDir tmp("cli-nockpt");
    auto gen = run_cli("gen-synthetic --seed 7 --out-dir " + tmp.path.string());
    REQUIRE(gen.exit_code == 0);
    const std::string missing = (tmp.path / "missing.ckpt").string();
    auto result = run_cli("eval --data-dir " + tmp.path.string() + " --checkpoint " + missing);
    CHECK(result.exit_code != 0);
    auto line = result.output.substr(0, result.output.find('\n'));
    auto record = nlohmann::json::parse(line);
    CHECK(record.at("command") == "eval");
    CHECK(record.at("error").get<std::string>().find(missing) != std::string::npos);
}

TEST_CASE("the full synthetic pipeline runs end to end through the binary") {
    testutil::TempDir tmp("cli-e2e");
    const std::string data = (tmp.path / "data").string();
    const std::string run = (tmp.path / "run").string();

    REQUIRE(run_cli("gen-synthetic --seed 7 --out-dir " + data).exit_code == 0);

    // prepare-features over the existing store is a warm no-op
    auto prep = run_cli("prepare-features --data-dir " + data);
    CHECK(prep.exit_code == 0);
    CHECK(prep.output.find("0 new entries") != std::string::npos);

    auto train = run_cli("train --data-dir " + data + " --out-dir " + run + " --epochs 4");
    REQUIRE(train.exit_code == 0);
    CHECK(std::filesystem::exists(tmp.path / "run" / "model.ckpt"));
    CHECK(std::filesystem::exists(tmp.path / "run" / "metrics.jsonl"));

    auto eval = run_cli("eval --data-dir " + data + " --checkpoint " + run +
                        "/model.ckpt --out " + run + "/eval.json");
    CHECK(eval.exit_code == 0);
    {
        std::ifstream in(tmp.path / "run" / "eval.json");
        nlohmann::json j;
        in >> j;
        for (const char* k : {"T1", "U", "S", "H", "gamma_used", "per_class_acc", "sweep"})
            CHECK(j.contains(k));
    }

    auto predict = run_cli("predict --data-dir " + data + " --checkpoint " + run +
                           "/model.ckpt --gzsl --gamma 0.2 --out " + run + "/preds.json");
    CHECK(predict.exit_code == 0);

    auto explain = run_cli("explain --data-dir " + data + " --checkpoint " + run +
                           "/model.ckpt --image-ref img_008_000 --out " + run +
                           "/explain.json");
    CHECK(explain.exit_code == 0);
    {
        std::ifstream in(tmp.path / "run" / "explain.json");
        nlohmann::json j;
        in >> j;
        CHECK(j.at("image_ref") == "img_008_000");
        CHECK(j.contains("classes"));
    }
}

TEST_CASE("collect runs with the mock client and is cache-idempotent") {
    testutil::TempDir tmp("cli-collect");
    {
        nlohmann::json classes = nlohmann::json::array();
        classes.push_back({{"id", 0}, {"name", "tiger"}});
        classes.push_back({{"id", 1}, {"name", "zebra"}});
        std::ofstream out(tmp.path / "classes.json");
        out << classes.dump();
    }
    {
        nlohmann::json docs;
        docs["tiger"] = "Golden color fur with stripes. Large body size. Forest habitat. "
                        "Feeds on deer.";
        docs["zebra"] = "Striped black and white color. Compact body shape. Grassland "
                        "habitat. Eats grass.";
        std::ofstream out(tmp.path / "raw.json");
        out << docs.dump();
    }
    const std::string base = "collect --mock-llm --seed 7 --classes " +
                             (tmp.path / "classes.json").string() + " --raw-docs " +
                             (tmp.path / "raw.json").string() + " --cache-dir " +
                             (tmp.path / "cache").string() + " --out-dir ";

    auto first = run_cli(base + (tmp.path / "out1").string());
    REQUIRE(first.exit_code == 0);
    CHECK(first.output.find("collected 2 documents") != std::string::npos);
    CHECK(std::filesystem::exists(tmp.path / "out1" / "documents.json"));
    CHECK(std::filesystem::exists(tmp.path / "out1" / "views.json"));

    auto second = run_cli(base + (tmp.path / "out2").string());
    REQUIRE(second.exit_code == 0);
    CHECK(second.output.find("(0 client calls)") != std::string::npos);
    CHECK(tree_hash(tmp.path / "out1") == tree_hash(tmp.path / "out2"));
}
