#pragma once

// Run configuration, content-addressed artifact layout, advisory locks, and
// the append-only results store.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "concepts.hpp"
#include "hash.hpp"

namespace concept_reach {

namespace fs = std::filesystem;

enum class Profile { Paper, Smoke };

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string to_string(Profile p) { return p == Profile::Paper ? "paper" : "smoke"; }
inline Profile profile_from_string(const std::string& s) {
    if (s == "paper") return Profile::Paper;
    if (s == "smoke") return Profile::Smoke;
    throw ConfigError("unknown profile: " + s);
}

// Fully-materialized run configuration: profile defaults are expanded at load
// time so stored artifacts never depend on implicit defaults.
struct RunConfig {
    Profile profile = Profile::Smoke;
    std::string root;  // artifact root; CONCEPT_REACH_ROOT or ./artifacts
    std::vector<uint64_t> seeds{0};
    // scale knobs resolved from the profile
    int target_total = 2700;
    int train_epochs = 5;
    int eval_samples = 50;
    int steer_steps = 5000;
    int concept_set_size = 1000;
    int classifier_epochs = 7;
    bool force = false;

    static RunConfig defaults(Profile p) {
        RunConfig c;
        c.profile = p;
        if (p == Profile::Paper) {
            c.seeds = {0, 1, 2, 3};
            c.target_total = 54000;
            c.train_epochs = 70;
            c.eval_samples = 100;
        } else {
            c.seeds = {0};
            c.target_total = 2700;
            c.train_epochs = 5;
            c.eval_samples = 50;
        }
        if (const char* env = std::getenv("CONCEPT_REACH_ROOT"))
            c.root = env;
        else
            c.root = "artifacts";
        return c;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["profile"] = to_string(profile);
        j["root"] = root;
        j["seeds"] = seeds;
        j["target_total"] = target_total;
        j["train_epochs"] = train_epochs;
        j["eval_samples"] = eval_samples;
        j["steer_steps"] = steer_steps;
        j["concept_set_size"] = concept_set_size;
        j["classifier_epochs"] = classifier_epochs;
        return j;
    }

    // Unknown keys are rejected; recognized keys override profile defaults.
    static RunConfig from_json(const nlohmann::json& j) {
        static const std::vector<std::string> known = {
            "profile",     "root",          "seeds",
            "target_total", "train_epochs", "eval_samples",
            "steer_steps", "concept_set_size", "classifier_epochs"};
        if (!j.is_object()) throw ConfigError("config must be an object");
        for (auto it = j.begin(); it != j.end(); ++it)
            if (std::find(known.begin(), known.end(), it.key()) == known.end())
                throw ConfigError("unknown config key: " + it.key());
        RunConfig c = defaults(profile_from_string(j.value("profile", std::string("smoke"))));
        if (j.contains("root")) c.root = j["root"].get<std::string>();
        if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<uint64_t>>();
        if (j.contains("target_total")) c.target_total = j["target_total"].get<int>();
        if (j.contains("train_epochs")) c.train_epochs = j["train_epochs"].get<int>();
        if (j.contains("eval_samples")) c.eval_samples = j["eval_samples"].get<int>();
        if (j.contains("steer_steps")) c.steer_steps = j["steer_steps"].get<int>();
        if (j.contains("concept_set_size")) c.concept_set_size = j["concept_set_size"].get<int>();
        if (j.contains("classifier_epochs")) c.classifier_epochs = j["classifier_epochs"].get<int>();
        return c;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config parse error: ") + e.what());
        }
        return from_json(j);
    }
};

// POSIX advisory lock held for the lifetime of the object.
class FileLock {
  public:
    explicit FileLock(const std::string& path) : path_(path) {
        fs::create_directories(fs::path(path).parent_path());
        fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
        if (fd_ < 0) throw std::runtime_error("FileLock: cannot open " + path);
        if (::flock(fd_, LOCK_EX) != 0) {
            ::close(fd_);
            throw std::runtime_error("FileLock: flock failed on " + path);
        }
    }
    ~FileLock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }
    FileLock(const FileLock&) = delete;
    FileLock& operator=(const FileLock&) = delete;

  private:
    std::string path_;
    int fd_ = -1;
};

// Content-addressed layout under the artifact root.
struct ArtifactIndex {
    std::string root;

    explicit ArtifactIndex(std::string r) : root(std::move(r)) {}

    std::string dataset_dir(const std::string& spec_hash) const {
        return root + "/datasets/" + spec_hash.substr(0, 16);
    }
    std::string checkpoint_dir(const std::string& spec_hash, uint64_t seed) const {
        return root + "/checkpoints/" + spec_hash.substr(0, 16) + "/seed" + std::to_string(seed);
    }
    std::string classifier_dir(const std::string& spec_hash, uint64_t seed) const {
        return root + "/classifiers/" + spec_hash.substr(0, 16) + "/seed" + std::to_string(seed);
    }
    std::string vector_key(const std::string& ckpt_hash, const std::string& space,
                           const std::string& target_key, const std::string& y_s) const {
        return sha256_hex(ckpt_hash + "|" + space + "|" + target_key + "|" + y_s).substr(0, 16);
    }
    std::string vector_path(const std::string& ckpt_hash, const std::string& space,
                            const std::string& target_key, const std::string& y_s) const {
        std::string tgt = target_key;
        for (auto& ch : tgt)
            if (ch == ':') ch = '-';
        // extension-free stem: the writer appends .bin and the .json sidecar
        return root + "/vectors/vec_" + space + "_" + tgt + "_" +
               vector_key(ckpt_hash, space, target_key, y_s);
    }
    std::string sample_dir(const std::string& key) const { return root + "/samples/" + key; }
    std::string results_dir(const std::string& family) const { return root + "/results/" + family; }
    std::string lock_path(const std::string& artifact) const {
        return root + "/.locks/" + sha256_hex(artifact).substr(0, 16) + ".lock";
    }
};

// One line of results.jsonl.
struct ReachabilityResult {
    std::string family;
    std::string spec_hash;
    uint64_t model_seed = 0;
    std::string method;  // prompting | prompt_steering | h_steering
    std::string target_key;
    std::string y_s;
    double accuracy = 0;
    int n = 0;
    int matched = 0;
    std::string verdicts_digest;
    nlohmann::json extra;  // family-specific axes (p, injection count, mask level, ...)
    std::optional<double> steer_final_loss;
    std::optional<double> steer_l2_norm;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["family"] = family;
        j["spec_hash"] = spec_hash;
        j["model_seed"] = model_seed;
        j["method"] = method;
        j["target"] = target_key;
        j["y_s"] = y_s;
        j["accuracy"] = accuracy;
        j["n"] = n;
        j["matched"] = matched;
        j["verdicts_digest"] = verdicts_digest;
        if (!extra.is_null()) j["extra"] = extra;
        if (steer_final_loss) j["steer_final_loss"] = *steer_final_loss;
        if (steer_l2_norm) j["steer_l2_norm"] = *steer_l2_norm;
        return j;
    }

    static ReachabilityResult from_json(const nlohmann::json& j) {
        ReachabilityResult r;
        r.family = j.at("family").get<std::string>();
        r.spec_hash = j.at("spec_hash").get<std::string>();
        r.model_seed = j.at("model_seed").get<uint64_t>();
        r.method = j.at("method").get<std::string>();
        r.target_key = j.at("target").get<std::string>();
        r.y_s = j.at("y_s").get<std::string>();
        r.accuracy = j.at("accuracy").get<double>();
        r.n = j.at("n").get<int>();
        r.matched = j.at("matched").get<int>();
        r.verdicts_digest = j.value("verdicts_digest", std::string());
        if (j.contains("extra")) r.extra = j["extra"];
        if (j.contains("steer_final_loss")) r.steer_final_loss = j["steer_final_loss"].get<double>();
        if (j.contains("steer_l2_norm")) r.steer_l2_norm = j["steer_l2_norm"].get<double>();
        if (r.n <= 0 || r.matched < 0 || r.matched > r.n)
            throw IntegrityError("result record: matched/n out of range");
        if (std::abs(r.accuracy - double(r.matched) / double(r.n)) > 1e-12)
            throw IntegrityError("result record: accuracy != matched/n");
        return r;
    }
};

// Single-writer append-only results store (guarded by an advisory lock).
class ResultsStore {
  public:
    explicit ResultsStore(std::string dir) : dir_(std::move(dir)) {
        fs::create_directories(dir_);
    }

    std::string jsonl_path() const { return dir_ + "/results.jsonl"; }
    std::string csv_path() const { return dir_ + "/results.csv"; }

    void append(const ReachabilityResult& r) {
        FileLock lock(dir_ + "/.results.lock");
        std::ofstream out(jsonl_path(), std::ios::app);
        if (!out) throw std::runtime_error("ResultsStore: cannot open " + jsonl_path());
        out << r.to_json().dump() << "\n";
    }

    std::vector<ReachabilityResult> load_all() const {
        std::vector<ReachabilityResult> out;
        std::ifstream in(jsonl_path());
        if (!in) return out;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            out.push_back(ReachabilityResult::from_json(nlohmann::json::parse(line)));
        }
        return out;
    }

    // Flat CSV export; deterministic given identical jsonl content.
    void export_csv() const {
        auto rows = load_all();
        FileLock lock(dir_ + "/.results.lock");
        std::ofstream out(csv_path(), std::ios::trunc);
        out << "family,spec_hash,model_seed,method,target,y_s,accuracy,n,matched,extra\n";
        for (const auto& r : rows) {
            std::string extra = r.extra.is_null() ? "" : r.extra.dump();
            for (auto& ch : extra)
                if (ch == ',') ch = ';';
            out << r.family << "," << r.spec_hash.substr(0, 16) << "," << r.model_seed << ","
                << r.method << "," << r.target_key << ",\"" << r.y_s << "\"," << r.accuracy << ","
                << r.n << "," << r.matched << "," << extra << "\n";
        }
    }

  private:
    std::string dir_;
};

struct VerifyReport {
    bool ok = true;
    std::vector<std::string> problems;
    int artifacts_checked = 0;

    void problem(const std::string& p) {
        ok = false;
        problems.push_back(p);
    }
};

// Integrity walk: datasets must carry spec.json whose hash matches the
// directory key; checkpoints must reference an existing dataset hash;
// results files must parse and satisfy accuracy = matched/n.
inline VerifyReport verify_root(const std::string& root) {
    VerifyReport rep;
    ArtifactIndex idx(root);

    fs::path datasets = fs::path(root) / "datasets";
    if (fs::exists(datasets))
        for (const auto& e : fs::directory_iterator(datasets)) {
            if (!e.is_directory()) continue;
            ++rep.artifacts_checked;
            fs::path spec = e.path() / "spec.json";
            if (!fs::exists(spec)) {
                rep.problem("dataset missing spec.json: " + e.path().string());
                continue;
            }
            std::ifstream in(spec);
            std::string body((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
            try {
                auto j = nlohmann::json::parse(body);
                std::string h = j.value("spec_hash", std::string());
                if (h.substr(0, 16) != e.path().filename().string())
                    rep.problem("dataset dir name does not match spec hash: " + e.path().string());
            } catch (const std::exception& ex) {
                rep.problem("dataset spec.json unparseable: " + e.path().string());
            }
        }

    fs::path checkpoints = fs::path(root) / "checkpoints";
    if (fs::exists(checkpoints))
        for (const auto& e : fs::recursive_directory_iterator(checkpoints)) {
            if (e.path().filename() != "model.json") continue;
            ++rep.artifacts_checked;
            std::ifstream in(e.path());
            try {
                auto j = nlohmann::json::parse(in);
                std::string spec_hash = j.at("provenance").at("dataset_spec_hash").get<std::string>();
                if (!fs::exists(idx.dataset_dir(spec_hash)))
                    rep.problem("checkpoint references missing dataset: " + e.path().string());
                std::string expect = j.at("weights_sha256").get<std::string>();
                fs::path weights = e.path().parent_path() / "weights.bin";
                if (!fs::exists(weights))
                    rep.problem("checkpoint missing weights.bin: " + e.path().string());
                else if (sha256_file(weights.string()) != expect)
                    rep.problem("checkpoint weights hash mismatch: " + weights.string());
            } catch (const std::exception& ex) {
                rep.problem(std::string("checkpoint metadata error: ") + e.path().string() + ": " +
                            ex.what());
            }
        }

    fs::path results = fs::path(root) / "results";
    if (fs::exists(results))
        for (const auto& e : fs::recursive_directory_iterator(results)) {
            if (e.path().filename() != "results.jsonl") continue;
            ++rep.artifacts_checked;
            try {
                ResultsStore(e.path().parent_path().string()).load_all();
            } catch (const std::exception& ex) {
                rep.problem(std::string("results file invalid: ") + e.path().string() + ": " +
                            ex.what());
            }
        }

    return rep;
}

}  // namespace concept_reach
