// mdnet command-line tool: corpus generation, two-stage training, extraction,
// matching, evaluation and the matching benchmark. Every command writes a
// JSON config snapshot next to its output; `mdnet replay` re-runs one.

#include <mdnet/binary_io.hpp>
#include <mdnet/extractor.hpp>
#include <mdnet/homography.hpp>
#include <mdnet/image_io.hpp>
#include <mdnet/matcher.hpp>
#include <mdnet/metrics.hpp>
#include <mdnet/trainer.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mdnet;
using io::read_file;
using io::write_file_atomic;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

fs::path snapshot_path_for(const fs::path& out) { return fs::path(out.string() + ".config.json"); }

void write_snapshot(const fs::path& path, const std::string& command, const json& options)
{
    const json snap{{"tool", "mdnet"}, {"snapshot_version", 1}, {"command", command}, {"options", options}};
    write_file_atomic(path, snap.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Training configuration <-> JSON

json train_config_to_json(const TrainConfig& c)
{
    json layers = json::array();
    for (const auto& l : c.model.layers) layers.push_back({l.kernel, l.out_channels, l.dilation});
    const auto& lim = c.sampler.limits;
    const auto& ph = c.sampler.photometric;
    return {
        {"stage", stage_name(c.stage)},
        {"lr", c.adam.lr},
        {"beta1", c.adam.beta1},
        {"beta2", c.adam.beta2},
        {"eps", c.adam.eps},
        {"batch_size", c.batch_size},
        {"iterations", c.iterations},
        {"num_detectors", c.num_detectors},
        {"seed", c.seed},
        {"checkpoint_every", c.checkpoint_every},
        {"clip_norm", c.clip_norm},
        {"model", {{"descriptor_dim", c.model.descriptor_dim}, {"layers", layers}}},
        {"loss",
         {{"alpha", c.loss.weights.alpha},
          {"beta", c.loss.weights.beta},
          {"gamma", c.loss.weights.gamma},
          {"variance_weighting", c.loss.variance_weighting},
          {"margin", c.loss.triplet.margin},
          {"grid_step", c.loss.triplet.grid_step},
          {"exclusion_radius", c.loss.triplet.exclusion_radius},
          {"peak_patch", c.loss.peaky.peak_patch},
          {"variance_patch", c.loss.peaky.variance_patch}}},
        {"sampler",
         {{"patch", c.sampler.patch},
          {"rotation_deg", lim.rotation_deg},
          {"scale_min", lim.scale_min},
          {"scale_max", lim.scale_max},
          {"translation", lim.translation},
          {"perspective", lim.perspective},
          {"min_overlap", lim.min_overlap},
          {"max_draws", lim.max_draws},
          {"photometric_strength", c.sampler.photometric_strength},
          {"brightness", ph.brightness},
          {"contrast_min", ph.contrast_min},
          {"contrast_max", ph.contrast_max},
          {"gain_min", ph.gain_min},
          {"gain_max", ph.gain_max},
          {"noise_sigma", ph.noise_sigma}}},
    };
}

// Reads `key` from `obj` into `dst` when present and marks it consumed.
template <typename V>
void take(const json& obj, const char* key, V& dst, std::vector<std::string>& seen)
{
    if (!obj.contains(key)) return;
    seen.emplace_back(key);
    try {
        dst = obj.at(key).get<V>();
    } catch (const json::exception&) {
        throw UsageError(std::string("config: bad value for '") + key + "'");
    }
}

void reject_unknown(const json& obj, const std::vector<std::string>& seen, const std::string& where)
{
    for (const auto& [k, v] : obj.items())
        if (std::find(seen.begin(), seen.end(), k) == seen.end())
            throw UsageError("config: unknown key '" + k + "' in " + where);
}

// Starts from the named preset for `stage` and applies the overrides in `j`.
TrainConfig train_config_from_json(const json& j, Stage stage)
{
    if (!j.is_object()) throw UsageError("config: top level must be a JSON object");
    std::vector<std::string> seen{"stage"};
    std::string preset = "desk";
    take(j, "preset", preset, seen);
    if (preset != "desk" && preset != "full") throw UsageError("config: preset must be 'desk' or 'full'");
    TrainConfig c = preset == "desk" ? TrainConfig::desk(stage) : TrainConfig::full(stage);
    if (j.contains("stage") && j.at("stage") != stage_name(stage))
        throw UsageError("config: stage '" + j.at("stage").dump() + "' disagrees with --stage");

    take(j, "lr", c.adam.lr, seen);
    take(j, "beta1", c.adam.beta1, seen);
    take(j, "beta2", c.adam.beta2, seen);
    take(j, "eps", c.adam.eps, seen);
    take(j, "batch_size", c.batch_size, seen);
    take(j, "iterations", c.iterations, seen);
    take(j, "num_detectors", c.num_detectors, seen);
    take(j, "seed", c.seed, seen);
    take(j, "checkpoint_every", c.checkpoint_every, seen);
    take(j, "clip_norm", c.clip_norm, seen);
    if (j.contains("model")) {
        seen.emplace_back("model");
        const json& m = j.at("model");
        std::vector<std::string> ms;
        take(m, "descriptor_dim", c.model.descriptor_dim, ms);
        if (m.contains("layers")) {
            ms.emplace_back("layers");
            c.model.layers.clear();
            for (const auto& l : m.at("layers")) {
                if (!l.is_array() || l.size() != 3) throw UsageError("config: each layer is [kernel, channels, dilation]");
                c.model.layers.push_back({l[0].get<std::size_t>(), l[1].get<std::size_t>(), l[2].get<std::size_t>()});
            }
        }
        reject_unknown(m, ms, "model");
    }
    if (j.contains("loss")) {
        seen.emplace_back("loss");
        const json& l = j.at("loss");
        std::vector<std::string> ls;
        take(l, "alpha", c.loss.weights.alpha, ls);
        take(l, "beta", c.loss.weights.beta, ls);
        take(l, "gamma", c.loss.weights.gamma, ls);
        take(l, "variance_weighting", c.loss.variance_weighting, ls);
        take(l, "margin", c.loss.triplet.margin, ls);
        take(l, "grid_step", c.loss.triplet.grid_step, ls);
        take(l, "exclusion_radius", c.loss.triplet.exclusion_radius, ls);
        take(l, "peak_patch", c.loss.peaky.peak_patch, ls);
        take(l, "variance_patch", c.loss.peaky.variance_patch, ls);
        reject_unknown(l, ls, "loss");
    }
    if (j.contains("sampler")) {
        seen.emplace_back("sampler");
        const json& s = j.at("sampler");
        auto& lim = c.sampler.limits;
        auto& ph = c.sampler.photometric;
        std::vector<std::string> ss;
        take(s, "patch", c.sampler.patch, ss);
        take(s, "rotation_deg", lim.rotation_deg, ss);
        take(s, "scale_min", lim.scale_min, ss);
        take(s, "scale_max", lim.scale_max, ss);
        take(s, "translation", lim.translation, ss);
        take(s, "perspective", lim.perspective, ss);
        take(s, "min_overlap", lim.min_overlap, ss);
        take(s, "max_draws", lim.max_draws, ss);
        take(s, "photometric_strength", c.sampler.photometric_strength, ss);
        take(s, "brightness", ph.brightness, ss);
        take(s, "contrast_min", ph.contrast_min, ss);
        take(s, "contrast_max", ph.contrast_max, ss);
        take(s, "gain_min", ph.gain_min, ss);
        take(s, "gain_max", ph.gain_max, ss);
        take(s, "noise_sigma", ph.noise_sigma, ss);
        reject_unknown(s, ss, "sampler");
    }
    reject_unknown(j, seen, "config");
    c.loss.descriptor_only = stage == Stage::priming;
    return c;
}

json parse_json_file(const fs::path& path)
{
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// gen-corpus

struct GenCorpusOptions {
    std::string out;
    std::size_t count = 20;
    std::size_t size = 256;
    std::uint64_t seed = 1;

    json to_json() const { return {{"out", out}, {"count", count}, {"size", size}, {"seed", seed}}; }
    static GenCorpusOptions from_json(const json& j)
    {
        GenCorpusOptions o;
        o.out = j.at("out").get<std::string>();
        o.count = j.at("count").get<std::size_t>();
        o.size = j.at("size").get<std::size_t>();
        o.seed = j.at("seed").get<std::uint64_t>();
        return o;
    }
};

int run_gen_corpus(const GenCorpusOptions& o)
{
    if (o.count == 0) throw UsageError("gen-corpus: --count must be >= 1");
    std::error_code ec;
    fs::create_directories(o.out, ec);
    if (ec || !fs::is_directory(o.out)) throw UsageError("gen-corpus: cannot create directory " + o.out);
    json manifest{{"count", o.count}, {"size", o.size}, {"seed", o.seed}, {"images", json::array()}};
    for (std::size_t i = 0; i < o.count; ++i) {
        const std::uint64_t s = Rng::derive(o.seed, i);
        char name[32];
        std::snprintf(name, sizeof name, "texture_%04zu.png", i);
        io::save_image(fs::path(o.out) / name, make_texture(s, o.size, o.size));
        manifest["images"].push_back({{"file", name}, {"seed", s}});
    }
    write_file_atomic(fs::path(o.out) / "manifest.json", manifest.dump(2) + "\n");
    write_snapshot(fs::path(o.out) / "gen-corpus.config.json", "gen-corpus", o.to_json());
    std::cerr << "wrote " << o.count << " images (" << o.size << "x" << o.size << ") to " << o.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
    std::string stage = "priming";
    std::string corpus;
    std::string out;
    std::string from;
    bool from_scratch = false;
    json config = json::object();  // overrides on top of the preset; resolved in the snapshot

    json to_json() const
    {
        return {{"stage", stage}, {"corpus", corpus}, {"out", out}, {"from", from}, {"from_scratch", from_scratch},
                {"config", config}};
    }
    static TrainOptions from_json(const json& j)
    {
        TrainOptions o;
        o.stage = j.at("stage").get<std::string>();
        o.corpus = j.at("corpus").get<std::string>();
        o.out = j.at("out").get<std::string>();
        o.from = j.at("from").get<std::string>();
        o.from_scratch = j.at("from_scratch").get<bool>();
        o.config = j.at("config");
        return o;
    }
};

int run_train(TrainOptions o)
{
    if (o.stage != "priming" && o.stage != "joint") throw UsageError("train: --stage must be priming or joint");
    const Stage stage = o.stage == "priming" ? Stage::priming : Stage::joint;
    if (stage == Stage::joint && o.from.empty() && !o.from_scratch)
        throw UsageError("train: the joint stage needs --from CKPT (or --from-scratch)");
    if (!o.from.empty() && o.from_scratch) throw UsageError("train: --from and --from-scratch are exclusive");

    const TrainConfig cfg = train_config_from_json(o.config, stage);
    cfg.validate();
    const Corpus corpus = io::load_corpus(o.corpus, cfg.sampler.patch);

    // The snapshot carries the fully resolved configuration.
    TrainOptions resolved = o;
    resolved.config = train_config_to_json(cfg);
    write_snapshot(snapshot_path_for(o.out), "train", resolved.to_json());

    const fs::path out(o.out);
    auto hook = [&](std::size_t it, const std::string& bytes) {
        if (it == cfg.iterations) {
            write_file_atomic(out, bytes);
        } else {
            write_file_atomic(fs::path(o.out + ".it" + std::to_string(it)), bytes);
        }
    };

    std::cerr << "training " << o.stage << ": " << cfg.iterations << " iterations, batch " << cfg.batch_size << ", N "
              << cfg.num_detectors << ", " << corpus.images.size() << " corpus images\n";
    TrainResult<float> result;
    if (stage == Stage::priming) {
        std::optional<ModelWeights<float>> start;
        if (!o.from.empty()) start = load_weights<float>(o.from);
        result = train_priming<float>(cfg, corpus, hook, std::move(start));
    } else {
        ModelConfig mc = cfg.model;
        mc.num_detectors = cfg.num_detectors;
        const ModelWeights<float> primed = o.from.empty() ? init_weights<float>(mc, cfg.seed) : load_weights<float>(o.from);
        if (primed.config.descriptor_dim != cfg.model.descriptor_dim || !(primed.config.layers == cfg.model.layers))
            throw UsageError("train: --from checkpoint backbone differs from the configured model");
        result = train_joint<float>(cfg, corpus, primed, hook);
    }
    write_file_atomic(fs::path(o.out + ".log.csv"), result.log.to_csv(true));

    const auto& log = result.log;
    const std::size_t n = log.records.size(), w = std::min<std::size_t>(50, n);
    auto trip = [](const TrainRecord& r) { return r.triplet; };
    std::cerr << "triplet loss: first " << w << " mean " << log.window_mean(0, w, trip) << ", last " << w << " mean "
              << log.window_mean(n - w, n, trip) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// extract

struct ExtractOptions {
    std::string model;
    std::string image;
    std::string out;
    ExtractionConfig cfg;

    json to_json() const
    {
        return {{"model", model},
                {"image", image},
                {"out", out},
                {"budget", cfg.budget},
                {"threshold", cfg.threshold},
                {"nms", cfg.nms_radius},
                {"scale_factor", cfg.scale_factor},
                {"min_dim", cfg.min_dim},
                {"cross_scale_nms", cfg.cross_scale_nms}};
    }
    static ExtractOptions from_json(const json& j)
    {
        ExtractOptions o;
        o.model = j.at("model").get<std::string>();
        o.image = j.at("image").get<std::string>();
        o.out = j.at("out").get<std::string>();
        o.cfg.budget = j.at("budget").get<std::size_t>();
        o.cfg.threshold = j.at("threshold").get<double>();
        o.cfg.nms_radius = j.at("nms").get<std::size_t>();
        o.cfg.scale_factor = j.at("scale_factor").get<double>();
        o.cfg.min_dim = j.at("min_dim").get<std::size_t>();
        o.cfg.cross_scale_nms = j.at("cross_scale_nms").get<bool>();
        return o;
    }
};

int run_extract(const ExtractOptions& o)
{
    const auto weights = load_weights<float>(o.model);
    const Image img = io::load_image(o.image);
    const auto feats = extract(img, weights, o.cfg);
    save_features(feats, o.out);
    write_snapshot(snapshot_path_for(o.out), "extract", o.to_json());
    std::cerr << "extracted " << feats.total() << " keypoints from " << o.image << " (" << img.width << "x"
              << img.height << ")\n";
    for (std::size_t s = 0; s < feats.num_sets(); ++s) std::cerr << "  set " << s << ": " << feats.size(s) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// match

struct MatchOptions {
    std::string f1, f2, out;

    json to_json() const { return {{"f1", f1}, {"f2", f2}, {"out", out}}; }
    static MatchOptions from_json(const json& j)
    {
        return {j.at("f1").get<std::string>(), j.at("f2").get<std::string>(), j.at("out").get<std::string>()};
    }
};

void check_compatible(const MultiFeatureSet& a, const MultiFeatureSet& b)
{
    if (a.num_sets() != b.num_sets())
        throw UsageError("feature files disagree on the number of sets (" + std::to_string(a.num_sets()) + " vs " +
                         std::to_string(b.num_sets()) + ")");
    if (a.descriptor_dim != b.descriptor_dim) throw UsageError("feature files disagree on the descriptor dimension");
}

int run_match(const MatchOptions& o)
{
    const auto a = load_features(o.f1), b = load_features(o.f2);
    check_compatible(a, b);
    const auto r = match_partitioned(a, b);
    write_file_atomic(o.out, matches_to_csv(r));
    write_snapshot(snapshot_path_for(o.out), "match", o.to_json());
    std::cerr << r.matches.size() << " mutual matches, " << r.distance_computations << " distance computations\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
    std::string f1, f2, matches, homography, out;
    std::string name = "pair";

    json to_json() const
    {
        return {{"f1", f1},       {"f2", f2},   {"matches", matches}, {"homography", homography},
                {"out", out},     {"name", name}};
    }
    static EvalOptions from_json(const json& j)
    {
        EvalOptions o;
        o.f1 = j.at("f1").get<std::string>();
        o.f2 = j.at("f2").get<std::string>();
        o.matches = j.at("matches").get<std::string>();
        o.homography = j.at("homography").get<std::string>();
        o.out = j.at("out").get<std::string>();
        o.name = j.at("name").get<std::string>();
        return o;
    }
};

int run_eval(const EvalOptions& o)
{
    const auto a = load_features(o.f1), b = load_features(o.f2);
    check_compatible(a, b);
    const auto g = parse_homography(read_file(o.homography));
    const auto m = matches_from_csv(read_file(o.matches));
    const auto report = evaluate_pair(a, b, g, m);
    write_file_atomic(o.out, reports_to_csv({{o.name, report}}));
    write_snapshot(snapshot_path_for(o.out), "eval", o.to_json());
    auto show = [](const Ratio& r) { return r ? std::to_string(*r) : std::string("n/a"); };
    std::cerr << "MMA@1/2/3: " << show(report.mma[0]) << " " << show(report.mma[1]) << " " << show(report.mma[2])
              << "  MS@3: " << show(report.ms[2]) << "  Rep@3: " << show(report.repeatability3)
              << "  Sep@3: " << show(report.separability3) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchOptions {
    std::string out;
    BenchConfig cfg;

    json to_json() const
    {
        return {{"out", out},          {"images", cfg.num_images}, {"kpts", cfg.keypoints},
                {"detectors", cfg.set_counts}, {"dim", cfg.dim},   {"seed", cfg.seed},
                {"verify", cfg.verify}};
    }
    static BenchOptions from_json(const json& j)
    {
        BenchOptions o;
        o.out = j.at("out").get<std::string>();
        o.cfg.num_images = j.at("images").get<std::size_t>();
        o.cfg.keypoints = j.at("kpts").get<std::size_t>();
        o.cfg.set_counts = j.at("detectors").get<std::vector<std::size_t>>();
        o.cfg.dim = j.at("dim").get<std::size_t>();
        o.cfg.seed = j.at("seed").get<std::uint64_t>();
        o.cfg.verify = j.at("verify").get<bool>();
        return o;
    }
};

int run_bench(BenchOptions o)
{
    for (auto n : o.cfg.set_counts)
        if (n == 0) throw UsageError("bench: detector counts must be >= 1");
    o.cfg.threads = configured_threads();
    const auto rows = bench_pairwise(o.cfg);
    write_file_atomic(o.out, bench_to_csv(rows));
    write_snapshot(snapshot_path_for(o.out), "bench", o.to_json());
    for (const auto& r : rows) {
        std::cerr << "N=" << r.num_sets << ": " << r.ms_per_pair << " ms/pair, " << r.distances_per_pair
                  << " distances/pair";
        if (r.speedup_vs_1 > 0) std::cerr << ", speedup " << r.speedup_vs_1;
        if (o.cfg.verify) std::cerr << (r.oracle_ok ? ", per-set check ok" : ", PER-SET CHECK FAILED");
        std::cerr << "\n";
    }
    for (const auto& r : rows)
        if (!r.oracle_ok) {
            std::cerr << "error: partitioned matching disagreed with per-set matching\n";
            return 1;
        }
    return 0;
}

// ---------------------------------------------------------------------------
// replay

int run_replay(const std::string& snapshot, const std::string& out_override)
{
    const json snap = parse_json_file(snapshot);
    if (!snap.is_object() || snap.value("tool", "") != "mdnet" || !snap.contains("command") || !snap.contains("options"))
        throw FormatError(snapshot + ": not an mdnet config snapshot");
    const std::string cmd = snap.at("command").get<std::string>();
    json opts = snap.at("options");
    if (!out_override.empty()) opts["out"] = out_override;
    std::cerr << "replaying " << cmd << " from " << snapshot << "\n";
    try {
        if (cmd == "gen-corpus") return run_gen_corpus(GenCorpusOptions::from_json(opts));
        if (cmd == "train") return run_train(TrainOptions::from_json(opts));
        if (cmd == "extract") return run_extract(ExtractOptions::from_json(opts));
        if (cmd == "match") return run_match(MatchOptions::from_json(opts));
        if (cmd == "eval") return run_eval(EvalOptions::from_json(opts));
        if (cmd == "bench") return run_bench(BenchOptions::from_json(opts));
    } catch (const json::exception& e) {
        throw FormatError(snapshot + ": " + e.what());
    }
    throw FormatError(snapshot + ": unknown command '" + cmd + "'");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Multi-detector local features"};
    app.require_subcommand(1);

    GenCorpusOptions gen;
    auto* c_gen = app.add_subcommand("gen-corpus", "Write synthetic training textures");
    c_gen->add_option("--out", gen.out, "Output directory")->required();
    c_gen->add_option("--count", gen.count, "Number of images")->capture_default_str();
    c_gen->add_option("--size", gen.size, "Side length in pixels")->capture_default_str();
    c_gen->add_option("--seed", gen.seed)->capture_default_str();

    TrainOptions train;
    std::string train_config_file;
    std::optional<std::size_t> train_n, train_iters;
    std::optional<std::uint64_t> train_seed;
    std::optional<double> train_lr;
    auto* c_train = app.add_subcommand("train", "Run the priming or joint training stage");
    c_train->add_option("--stage", train.stage)->required()->check(CLI::IsMember({"priming", "joint"}));
    c_train->add_option("--corpus", train.corpus, "Directory of PNG/PPM images")->required();
    c_train->add_option("--out", train.out, "Checkpoint to write")->required();
    c_train->add_option("--config", train_config_file, "JSON overrides on top of the preset");
    c_train->add_option("--from", train.from, "Checkpoint to start from");
    c_train->add_flag("--from-scratch", train.from_scratch, "Allow the joint stage without a primed checkpoint");
    c_train->add_option("--num-detectors", train_n);
    c_train->add_option("--iterations", train_iters);
    c_train->add_option("--seed", train_seed);
    c_train->add_option("--lr", train_lr);

    ExtractOptions ext;
    auto* c_ext = app.add_subcommand("extract", "Detect and describe keypoints");
    c_ext->add_option("--model", ext.model)->required();
    c_ext->add_option("--image", ext.image)->required();
    c_ext->add_option("--out", ext.out)->required();
    c_ext->add_option("--budget", ext.cfg.budget)->capture_default_str();
    c_ext->add_option("--threshold", ext.cfg.threshold)->capture_default_str();
    c_ext->add_option("--nms", ext.cfg.nms_radius)->capture_default_str();
    c_ext->add_option("--min-dim", ext.cfg.min_dim)->capture_default_str();
    c_ext->add_option("--scale-factor", ext.cfg.scale_factor)->capture_default_str();
    c_ext->add_flag("--cross-scale-nms", ext.cfg.cross_scale_nms);

    MatchOptions mat;
    auto* c_match = app.add_subcommand("match", "Partitioned mutual nearest-neighbour matching");
    c_match->add_option("--f1", mat.f1)->required();
    c_match->add_option("--f2", mat.f2)->required();
    c_match->add_option("--out", mat.out)->required();

    EvalOptions ev;
    auto* c_eval = app.add_subcommand("eval", "Score matches against a ground-truth homography");
    c_eval->add_option("--f1", ev.f1)->required();
    c_eval->add_option("--f2", ev.f2)->required();
    c_eval->add_option("--matches", ev.matches)->required();
    c_eval->add_option("--homography", ev.homography, "Text file with 9 numbers, row-major")->required();
    c_eval->add_option("--out", ev.out)->required();
    c_eval->add_option("--name", ev.name)->capture_default_str();

    BenchOptions bench;
    auto* c_bench = app.add_subcommand("bench", "Time partitioned matching for several N");
    c_bench->add_option("--out", bench.out)->required();
    c_bench->add_option("--images", bench.cfg.num_images)->capture_default_str();
    c_bench->add_option("--kpts", bench.cfg.keypoints)->capture_default_str();
    c_bench->add_option("--detectors", bench.cfg.set_counts)->delimiter(',')->capture_default_str();
    c_bench->add_option("--dim", bench.cfg.dim)->capture_default_str();
    c_bench->add_option("--seed", bench.cfg.seed)->capture_default_str();
    c_bench->add_flag("--verify", bench.cfg.verify, "Check each set pair against a standalone match");

    std::string replay_snapshot, replay_out;
    auto* c_replay = app.add_subcommand("replay", "Re-run a command from its config snapshot");
    c_replay->add_option("snapshot", replay_snapshot)->required();
    c_replay->add_option("--out", replay_out, "Write to this path instead of the recorded one");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (c_gen->parsed()) return run_gen_corpus(gen);
        if (c_train->parsed()) {
            if (!train_config_file.empty()) train.config = parse_json_file(train_config_file);
            if (!train.config.is_object()) throw UsageError("train: --config must hold a JSON object");
            if (train_n) train.config["num_detectors"] = *train_n;
            if (train_iters) train.config["iterations"] = *train_iters;
            if (train_seed) train.config["seed"] = *train_seed;
            if (train_lr) train.config["lr"] = *train_lr;
            return run_train(train);
        }
        if (c_ext->parsed()) return run_extract(ext);
        if (c_match->parsed()) return run_match(mat);
        if (c_eval->parsed()) return run_eval(ev);
        if (c_bench->parsed()) return run_bench(bench);
        if (c_replay->parsed()) return run_replay(replay_snapshot, replay_out);
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
