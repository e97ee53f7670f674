#include "ugs/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "ugs/error.hpp"
#include "ugs/features.hpp"
#include "ugs/fixtures.hpp"
#include "ugs/service.hpp"

namespace ugs {

namespace {

namespace fs = std::filesystem;

const char* to_string(PartMetric m) { return m == PartMetric::containment ? "containment" : "iou"; }
const char* to_string(DominanceScope d) { return d == DominanceScope::all_high ? "all_high" : "candidates_only"; }
const char* to_string(SweepMode s) { return s == SweepMode::per_instance ? "per_instance" : "per_dataset"; }

PartMetric part_metric_from(const std::string& s) {
    if (s == "containment") return PartMetric::containment;
    if (s == "iou") return PartMetric::iou;
    throw InvalidArgument("part_metric must be containment or iou");
}

DominanceScope dominance_from(const std::string& s) {
    if (s == "all_high") return DominanceScope::all_high;
    if (s == "candidates_only") return DominanceScope::candidates_only;
    throw InvalidArgument("dominance must be all_high or candidates_only");
}

SweepMode sweep_mode_from(const std::string& s) {
    if (s == "per_instance" || s == "per-instance") return SweepMode::per_instance;
    if (s == "per_dataset" || s == "per-dataset") return SweepMode::per_dataset;
    throw InvalidArgument("sweep mode must be per-instance or per-dataset");
}

std::vector<double> parse_list(const std::string& text, const std::string& what) {
    std::vector<double> out;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ',');) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(p, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (p.empty() || used != p.size()) throw InvalidArgument(fmt::format("bad {} value '{}'", what, p));
        out.push_back(v);
    }
    if (out.empty()) throw InvalidArgument(what + " list is empty");
    return out;
}

// Walks `j` and calls `fn(key, value)` for every leaf key in `allowed`; anything else is an error.
template <typename Fn>
void for_keys(const Json& j, const std::string& section, const std::vector<std::string>& allowed, Fn fn) {
    if (!j.is_object()) throw FormatError("config section " + section + " must be an object");
    for (const auto& [k, v] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
            throw FormatError("unknown config key " + section + "." + k);
        }
        fn(k, v);
    }
}

std::vector<fs::path> list_files(const fs::path& dir, const std::string& ext) {
    if (!fs::is_directory(dir)) throw IoError("directory not found: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ext) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

fs::path data_root() {
    if (const char* env = std::getenv("UGS_DATA_DIR"); env != nullptr && *env != '\0') return env;
    return "data";
}

template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn fn) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
}

// Flags shared by several subcommands. Optional so that only flags actually given
// override the config file.
struct Flags {
    std::optional<std::string> config_path;
    bool print_config = false;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;

    std::optional<double> tau_conf, tau_overlap, tau_area, tau_sim, nms_iou;
    std::optional<std::string> thetas;
    std::optional<int> max_instances, patch_size;

    std::optional<std::string> sweep, targets, sweep_mode;
    std::optional<int> max_clicks;
    std::optional<std::size_t> max_dets;

    std::optional<int> epochs, batch, images;
    std::optional<double> lr;

    // paths and modes
    std::optional<std::string> features_dir, manifest, labels, out, gt_labels, checkpoint, metrics;
    std::string segmenter = "hierarchy";
    std::string kind = "three-instance";
    int count = 1;
    double eps = 1e-4;
    std::size_t params = 200;
    std::string host = "127.0.0.1";
    int port = 8080;
    bool json_report = false;
};

void apply_flags(CliConfig& cfg, const Flags& f) {
    if (f.seed) {
        cfg.seed = *f.seed;
        cfg.train.seed = *f.seed;
        cfg.pipeline.divide.eigen.seed = *f.seed;
    }
    if (f.jobs) cfg.jobs = *f.jobs;
    if (f.tau_conf) cfg.pipeline.divide.tau_conf = *f.tau_conf;
    if (f.tau_sim) cfg.pipeline.divide.tau_sim = *f.tau_sim;
    if (f.max_instances) cfg.pipeline.divide.max_instances = *f.max_instances;
    if (f.patch_size) cfg.pipeline.divide.patch_size = *f.patch_size;
    if (f.tau_overlap) cfg.pipeline.hierarchy.tau_overlap = *f.tau_overlap;
    if (f.tau_area) cfg.pipeline.hierarchy.tau_area = *f.tau_area;
    if (f.nms_iou) cfg.pipeline.hierarchy.nms_iou = *f.nms_iou;
    if (f.thetas) cfg.pipeline.conquer.schedule = ThresholdSchedule(parse_list(*f.thetas, "theta"));
    if (f.sweep) cfg.benchmark.g_grid = parse_grid(*f.sweep);
    if (f.targets) cfg.benchmark.targets = parse_list(*f.targets, "target");
    if (f.sweep_mode) cfg.benchmark.sweep_mode = sweep_mode_from(*f.sweep_mode);
    if (f.max_clicks) cfg.benchmark.max_clicks = *f.max_clicks;
    if (f.max_dets) cfg.max_dets = *f.max_dets;
    if (f.epochs) cfg.train.epochs = *f.epochs;
    if (f.batch) cfg.train.batch = *f.batch;
    if (f.images) {
        // Keep the configured train/held-out ratio.
        const double ratio = static_cast<double>(cfg.train.train_images) / cfg.train.images;
        cfg.train.images = *f.images;
        cfg.train.train_images = std::clamp(static_cast<int>(std::lround(ratio * *f.images)), 1,
                                            std::max(1, *f.images - 1));
    }
    if (f.lr) cfg.train.lr = *f.lr;
    cfg.benchmark.jobs = cfg.jobs;
    cfg.train.jobs = cfg.jobs;
}

void validate(const CliConfig& cfg) {
    validate(cfg.pipeline.divide);
    validate(cfg.pipeline.hierarchy);
    validate(cfg.train);
    if (cfg.jobs < 1) throw InvalidArgument("jobs must be positive");
    if (cfg.benchmark.max_clicks < 1) throw InvalidArgument("max_clicks must be positive");
    if (cfg.max_dets < 1) throw InvalidArgument("max_dets must be positive");
    if (cfg.pipeline.conquer.min_patches < 1) throw InvalidArgument("min_patches must be positive");
    if (cfg.benchmark.targets) {
        for (double t : *cfg.benchmark.targets) {
            if (!(t > 0.0 && t <= 1.0)) throw InvalidArgument("IoU targets must lie in (0, 1]");
        }
    }
}

std::unique_ptr<Segmenter> make_segmenter(const Flags& f, const Manifest& manifest) {
    if (f.segmenter == "oracle") {
        auto seg = std::make_unique<OracleSegmenter>();
        for (const auto& item : manifest.items) seg->add(item.image_id, flatten_masks(read_labels(item.gt_labels)));
        return seg;
    }
    if (f.segmenter == "empty") return std::make_unique<EmptySegmenter>();
    if (f.segmenter == "hierarchy") {
        if (!f.labels) throw InvalidArgument("--segmenter hierarchy needs --labels");
        return std::make_unique<HierarchySegmenter>(HierarchySegmenter::from_dir(*f.labels));
    }
    if (f.segmenter == "toy") {
        if (!f.checkpoint) throw InvalidArgument("--segmenter toy needs --checkpoint");
        return std::make_unique<ToyDecoderSegmenter>(load_checkpoint(*f.checkpoint));
    }
    throw InvalidArgument("unknown segmenter " + f.segmenter);
}

int cmd_gen_labels(const CliConfig& cfg, const Flags& f, std::ostream& out, std::ostream& err) {
    struct Job {
        std::string image_id;
        fs::path features;
        std::optional<fs::path> gt;
    };
    std::vector<Job> jobs;
    if (f.manifest) {
        for (const auto& item : load_manifest(*f.manifest).items) jobs.push_back({item.image_id, item.features, {}});
    } else {
        const fs::path dir = f.features_dir ? fs::path(*f.features_dir) : data_root() / "features";
        for (const auto& p : list_files(dir, ".ugf")) jobs.push_back({p.stem().string(), p, {}});
    }
    if (jobs.empty()) throw InvalidArgument("no feature files to label");
    if (f.gt_labels) {
        for (auto& j : jobs) {
            const fs::path gt = fs::path(*f.gt_labels) / (j.image_id + ".json");
            if (fs::exists(gt)) j.gt = gt;
        }
    }
    const fs::path out_dir = f.out ? fs::path(*f.out) : data_root() / "labels";

    std::vector<PseudoLabelResult> results(jobs.size());
    parallel_for(jobs.size(), cfg.jobs, [&](std::size_t i) {
        const PatchFeatureMap map = read_features(jobs[i].features);
        std::vector<BinaryMask> gt;
        if (jobs[i].gt) gt = flatten_masks(read_labels(*jobs[i].gt));
        results[i] = build_pseudolabels(map, jobs[i].image_id, cfg.pipeline, gt);
        write_labels(results[i].labels, out_dir / (jobs[i].image_id + ".json"));
    });

    std::size_t hierarchies = 0;
    std::size_t masks = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        hierarchies += results[i].labels.hierarchies.size();
        masks += results[i].labels.mask_count();
        if (results[i].status != "ok") err << fmt::format("{}: {}\n", jobs[i].image_id, results[i].status);
    }
    out << fmt::format("{} hierarchies, {} masks\n", hierarchies, masks);
    return 0;
}

int cmd_eval_noc(const CliConfig& cfg, const Flags& f, std::ostream& out) {
    if (!f.manifest) throw InvalidArgument("eval-noc needs --manifest");
    const Manifest manifest = load_manifest(*f.manifest, f.segmenter == "toy");
    const auto seg = make_segmenter(f, manifest);
    const BenchmarkReport report = run_benchmark(*seg, manifest, cfg.benchmark);
    out << report.to_table();
    if (f.out) write_text(*f.out, report.to_json().dump(2) + "\n");
    if (f.json_report) out << report.to_json().dump() << "\n";
    return 0;
}

int cmd_eval_ar(const CliConfig& cfg, const Flags& f, std::ostream& out) {
    if (!f.manifest) throw InvalidArgument("eval-ar needs --manifest");
    if (!f.labels) throw InvalidArgument("eval-ar needs --labels with the proposal label files");
    const Manifest manifest = load_manifest(*f.manifest, false);
    std::vector<PseudoLabelSet> proposals;
    for (const auto& item : manifest.items) proposals.push_back(read_labels(fs::path(*f.labels) / (item.image_id + ".json")));
    ArConfig ar;
    ar.g_grid = cfg.benchmark.g_grid;
    ar.grid_step = ar.g_grid.size() > 1 ? ar.g_grid[1] - ar.g_grid[0] : 0.1;
    ar.conf_floor = cfg.conf_floor;
    ar.max_dets = cfg.max_dets;
    const ArReport report = run_ar(manifest, proposals, ar);
    out << report.to_table();
    if (f.out) write_text(*f.out, report.to_json().dump(2) + "\n");
    if (f.json_report) out << report.to_json().dump() << "\n";
    return 0;
}

int cmd_train_toy(const CliConfig& cfg, const Flags& f, std::ostream& out) {
    const fs::path ckpt = f.out ? fs::path(*f.out) : data_root() / "toy.ugtd";
    std::ofstream metrics;
    if (f.metrics) {
        if (fs::path(*f.metrics).has_parent_path()) fs::create_directories(fs::path(*f.metrics).parent_path());
        metrics.open(*f.metrics, std::ios::trunc);
        if (!metrics) throw IoError("cannot open " + *f.metrics);
    }
    const TrainResult result = train_toy(cfg.train, [&](const EpochMetrics& m) {
        const std::string line = metrics_json_line(m);
        out << line << "\n" << std::flush;
        if (metrics) metrics << line << "\n" << std::flush;
    });
    save_checkpoint(result.params, ckpt);
    if (result.diverged) {
        throw NumericalError(fmt::format("training diverged after epoch {}; last good checkpoint written to {}",
                                         result.metrics.size(), ckpt.string()));
    }
    return 0;
}

int cmd_gradcheck(const CliConfig& cfg, const Flags& f, std::ostream& out) {
    const DecoderParams params = f.checkpoint ? load_checkpoint(*f.checkpoint)
                                              : DecoderParams::init(cfg.train.shape, cfg.train.sigma_f, cfg.seed);
    TrainConfig tc = cfg.train;
    tc.shape = params.shape();
    tc.images = 2;
    tc.train_images = 1;
    const auto corpus = make_toy_corpus(tc);
    const auto& img = corpus.front();
    const std::size_t level = img.levels.size() > 1 ? 1 : 0;
    const Click c = initial_click(img.levels[level]);
    const TrainSample sample{&img.features, c.x, c.y, img.granularity[level], img.levels[level]};
    const GradCheckReport r = grad_check(params, sample, f.eps, f.params, cfg.seed, tc.loss);
    Json j;
    j["max_rel_error"] = r.max_rel_error;
    j["checked"] = r.checked;
    j["worst_param"] = r.worst_param;
    j["eps"] = f.eps;
    out << j.dump() << "\n";
    return r.max_rel_error <= 1e-3 ? 0 : 1;
}

int cmd_synth(const CliConfig& cfg, const Flags& f, std::ostream& out) {
    const fs::path dir = f.out ? fs::path(*f.out) : data_root();
    Json items = Json::array();
    for (int i = 0; i < f.count; ++i) {
        SynthResult synth;
        std::string id;
        if (f.kind == "three-instance") {
            synth = synth_features(fixtures::three_instance_spec(cfg.seed + 7 + static_cast<std::uint64_t>(i), 0.05));
            id = fmt::format("three-{:03d}", i);
        } else if (f.kind == "many-parts") {
            synth = synth_features(fixtures::many_parts_spec(i, cfg.seed + 11));
            id = fmt::format("parts-{:03d}", i);
        } else if (f.kind == "nested") {
            synth = fixtures::nested_squares(cfg.train.grid, cfg.train.shape.feature_dim,
                                             cfg.seed * 100003ULL + static_cast<std::uint64_t>(i), cfg.train.noise_sigma)
                        .synth;
            id = fmt::format("nested-{:03d}", i);
        } else {
            throw InvalidArgument("unknown synth kind " + f.kind + " (three-instance, many-parts, nested)");
        }
        write_features(synth.map, dir / "features" / (id + ".ugf"));
        write_labels(fixtures::gt_label_set(synth, id), dir / "gt" / (id + ".json"));
        Json item;
        item["image_id"] = id;
        item["features"] = "features/" + id + ".ugf";
        item["gt_labels"] = "gt/" + id + ".json";
        items.push_back(std::move(item));
    }
    Json manifest;
    manifest["name"] = f.kind;
    manifest["items"] = std::move(items);
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    out << fmt::format("{} images written to {}\n", f.count, dir.string());
    return 0;
}

int cmd_serve(const Flags& f, std::ostream& out) {
    const fs::path dir = f.labels ? fs::path(*f.labels) : data_root() / "labels";
    const ServeState state = load_state(dir);
    Server server(state);
    const int port = server.bind(f.host, f.port);
    out << fmt::format("serving {} images on http://{}:{}\n", state.labels.size(), f.host, port) << std::flush;
    server.listen();
    return 0;
}

void add_pipeline_flags(CLI::App* app, Flags& f) {
    app->add_option("--tau-conf", f.tau_conf, "Confidence floor for divide masks");
    app->add_option("--tau-overlap", f.tau_overlap, "Part assignment threshold");
    app->add_option("--tau-area", f.tau_area, "Minimum instance area ratio");
    app->add_option("--tau-sim", f.tau_sim, "Affinity cosine threshold");
    app->add_option("--thetas", f.thetas, "Conquer thresholds, comma separated, strictly decreasing");
    app->add_option("--nms-iou", f.nms_iou, "NMS IoU threshold");
    app->add_option("--max-instances", f.max_instances, "Divide iterations per image");
    app->add_option("--patch-size", f.patch_size, "Pixels per patch side");
}

void add_eval_flags(CLI::App* app, Flags& f) {
    app->add_option("--sweep", f.sweep, "Granularity grid start:stop:step or list");
    app->add_option("--max-dets", f.max_dets, "Proposal cap for AR");
}

}  // namespace

CliConfig default_cli_config() {
    CliConfig cfg;
    cfg.jobs = static_cast<int>(std::max(1U, std::thread::hardware_concurrency()));
    cfg.benchmark.jobs = cfg.jobs;
    cfg.train.jobs = cfg.jobs;
    return cfg;
}

Json config_to_json(const CliConfig& cfg) {
    const auto& d = cfg.pipeline.divide;
    const auto& h = cfg.pipeline.hierarchy;
    const auto& t = cfg.train;
    Json j;
    j["seed"] = cfg.seed;
    j["jobs"] = cfg.jobs;
    j["divide"] = {{"tau_sim", d.tau_sim},
                   {"eps_floor", d.eps_floor},
                   {"max_instances", d.max_instances},
                   {"tau_conf", d.tau_conf},
                   {"patch_size", d.patch_size},
                   {"eigen_max_iterations", d.eigen.max_iterations},
                   {"eigen_tolerance", d.eigen.tolerance}};
    j["conquer"] = {{"thetas", cfg.pipeline.conquer.schedule.thetas()},
                    {"min_patches", cfg.pipeline.conquer.min_patches}};
    j["hierarchy"] = {{"tau_area", h.tau_area},
                      {"tau_overlap", h.tau_overlap},
                      {"nms_iou", h.nms_iou},
                      {"g_floor", h.g_floor},
                      {"g_span", h.g_span},
                      {"part_metric", to_string(h.part_metric)},
                      {"dominance", to_string(h.dominance)}};
    Json targets = cfg.benchmark.targets ? Json(*cfg.benchmark.targets) : Json(nullptr);
    j["eval"] = {{"sweep", cfg.benchmark.g_grid},
                 {"targets", targets},
                 {"max_clicks", cfg.benchmark.max_clicks},
                 {"sweep_mode", to_string(cfg.benchmark.sweep_mode)},
                 {"max_dets", cfg.max_dets},
                 {"conf_floor", cfg.conf_floor}};
    j["decoder"] = {{"d_model", t.shape.d_model},
                    {"d_fourier", t.shape.d_fourier},
                    {"feature_dim", t.shape.feature_dim},
                    {"sigma_f", t.sigma_f},
                    {"focal_weight", t.loss.focal_weight},
                    {"dice_weight", t.loss.dice_weight},
                    {"focal_alpha", t.loss.alpha},
                    {"focal_gamma", t.loss.gamma},
                    {"dice_smooth", t.loss.smooth},
                    {"epochs", t.epochs},
                    {"batch", t.batch},
                    {"lr", t.lr},
                    {"grid", t.grid},
                    {"images", t.images},
                    {"train_images", t.train_images},
                    {"corpus_seed", t.corpus_seed},
                    {"noise_sigma", t.noise_sigma},
                    {"g_jitter", t.g_jitter}};
    return j;
}

void apply_config_json(CliConfig& cfg, const Json& j) {
    try {
        for_keys(j, "", {"seed", "jobs", "divide", "conquer", "hierarchy", "eval", "decoder"}, [&](const std::string& k,
                                                                                                  const Json& v) {
            if (k == "seed") cfg.seed = cfg.train.seed = cfg.pipeline.divide.eigen.seed = v.get<std::uint64_t>();
            if (k == "jobs") cfg.jobs = v.get<int>();
        });
        auto& d = cfg.pipeline.divide;
        if (j.contains("divide")) {
            for_keys(j["divide"], "divide",
                     {"tau_sim", "eps_floor", "max_instances", "tau_conf", "patch_size", "eigen_max_iterations",
                      "eigen_tolerance"},
                     [&](const std::string& k, const Json& v) {
                         if (k == "tau_sim") d.tau_sim = v.get<double>();
                         if (k == "eps_floor") d.eps_floor = v.get<double>();
                         if (k == "max_instances") d.max_instances = v.get<int>();
                         if (k == "tau_conf") d.tau_conf = v.get<double>();
                         if (k == "patch_size") d.patch_size = v.get<int>();
                         if (k == "eigen_max_iterations") d.eigen.max_iterations = v.get<int>();
                         if (k == "eigen_tolerance") d.eigen.tolerance = v.get<double>();
                     });
        }
        if (j.contains("conquer")) {
            for_keys(j["conquer"], "conquer", {"thetas", "min_patches"}, [&](const std::string& k, const Json& v) {
                if (k == "thetas") cfg.pipeline.conquer.schedule = ThresholdSchedule(v.get<std::vector<double>>());
                if (k == "min_patches") cfg.pipeline.conquer.min_patches = v.get<int>();
            });
        }
        auto& h = cfg.pipeline.hierarchy;
        if (j.contains("hierarchy")) {
            for_keys(j["hierarchy"], "hierarchy",
                     {"tau_area", "tau_overlap", "nms_iou", "g_floor", "g_span", "part_metric", "dominance"},
                     [&](const std::string& k, const Json& v) {
                         if (k == "tau_area") h.tau_area = v.get<double>();
                         if (k == "tau_overlap") h.tau_overlap = v.get<double>();
                         if (k == "nms_iou") h.nms_iou = v.get<double>();
                         if (k == "g_floor") h.g_floor = v.get<double>();
                         if (k == "g_span") h.g_span = v.get<double>();
                         if (k == "part_metric") h.part_metric = part_metric_from(v.get<std::string>());
                         if (k == "dominance") h.dominance = dominance_from(v.get<std::string>());
                     });
        }
        if (j.contains("eval")) {
            for_keys(j["eval"], "eval", {"sweep", "targets", "max_clicks", "sweep_mode", "max_dets", "conf_floor"},
                     [&](const std::string& k, const Json& v) {
                         if (k == "sweep") {
                             cfg.benchmark.g_grid =
                                 v.is_string() ? parse_grid(v.get<std::string>()) : v.get<std::vector<double>>();
                         }
                         if (k == "targets") {
                             if (v.is_null()) {
                                 cfg.benchmark.targets.reset();
                             } else {
                                 cfg.benchmark.targets = v.get<std::vector<double>>();
                             }
                         }
                         if (k == "max_clicks") cfg.benchmark.max_clicks = v.get<int>();
                         if (k == "sweep_mode") cfg.benchmark.sweep_mode = sweep_mode_from(v.get<std::string>());
                         if (k == "max_dets") cfg.max_dets = v.get<std::size_t>();
                         if (k == "conf_floor") cfg.conf_floor = v.get<double>();
                     });
        }
        auto& t = cfg.train;
        if (j.contains("decoder")) {
            for_keys(j["decoder"], "decoder",
                     {"d_model", "d_fourier", "feature_dim", "sigma_f", "focal_weight", "dice_weight", "focal_alpha",
                      "focal_gamma", "dice_smooth", "epochs", "batch", "lr", "grid", "images", "train_images",
                      "corpus_seed", "noise_sigma", "g_jitter"},
                     [&](const std::string& k, const Json& v) {
                         if (k == "d_model") t.shape.d_model = v.get<int>();
                         if (k == "d_fourier") t.shape.d_fourier = v.get<int>();
                         if (k == "feature_dim") t.shape.feature_dim = v.get<int>();
                         if (k == "sigma_f") t.sigma_f = v.get<double>();
                         if (k == "focal_weight") t.loss.focal_weight = v.get<double>();
                         if (k == "dice_weight") t.loss.dice_weight = v.get<double>();
                         if (k == "focal_alpha") t.loss.alpha = v.get<double>();
                         if (k == "focal_gamma") t.loss.gamma = v.get<double>();
                         if (k == "dice_smooth") t.loss.smooth = v.get<double>();
                         if (k == "epochs") t.epochs = v.get<int>();
                         if (k == "batch") t.batch = v.get<int>();
                         if (k == "lr") t.lr = v.get<double>();
                         if (k == "grid") t.grid = v.get<int>();
                         if (k == "images") t.images = v.get<int>();
                         if (k == "train_images") t.train_images = v.get<int>();
                         if (k == "corpus_seed") t.corpus_seed = v.get<std::uint64_t>();
                         if (k == "noise_sigma") t.noise_sigma = v.get<double>();
                         if (k == "g_jitter") t.g_jitter = v.get<double>();
                     });
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad config value: ") + e.what());
    }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Unsupervised granular segmentation toolkit", "ugs"};
    app.set_version_flag("--version", "ugs 0.1.0");
    app.fallthrough();
    Flags f;
    app.add_option("--config", f.config_path, "JSON config file; flags take precedence");
    app.add_flag("--print-config", f.print_config, "Print the resolved config and exit");
    app.add_option("--seed", f.seed, "Seed for every random choice");
    app.add_option("--jobs", f.jobs, "Worker threads (default: available cores)");

    auto* gen = app.add_subcommand("gen-labels", "Generate pseudo-label hierarchies from feature files");
    auto* gen_dir = gen->add_option("--features-dir", f.features_dir, "Directory of .ugf feature files");
    auto* gen_manifest = gen->add_option("--manifest", f.manifest, "Dataset manifest instead of a directory");
    gen_dir->excludes(gen_manifest);
    gen->add_option("--out", f.out, "Output label directory");
    gen->add_option("--gt-labels", f.gt_labels, "Directory of GT label files to fuse in");
    add_pipeline_flags(gen, f);

    auto* noc = app.add_subcommand("eval-noc", "Click-simulation benchmark (NoC, 1-IoU)");
    noc->add_option("--manifest", f.manifest, "Dataset manifest")->required();
    noc->add_option("--segmenter", f.segmenter, "oracle | empty | hierarchy | toy")
        ->check(CLI::IsMember({"oracle", "empty", "hierarchy", "toy"}));
    noc->add_option("--labels", f.labels, "Label directory for the hierarchy segmenter");
    noc->add_option("--checkpoint", f.checkpoint, "Decoder checkpoint for the toy segmenter");
    noc->add_option("--targets", f.targets, "IoU targets, comma separated");
    noc->add_option("--max-clicks", f.max_clicks, "Click budget per session");
    noc->add_option("--sweep-mode", f.sweep_mode, "per-instance | per-dataset");
    noc->add_option("--out", f.out, "Write the JSON report here");
    noc->add_flag("--json", f.json_report, "Also print the JSON report");
    add_eval_flags(noc, f);

    auto* ar = app.add_subcommand("eval-ar", "Average recall of aggregated proposals");
    ar->add_option("--manifest", f.manifest, "Dataset manifest")->required();
    ar->add_option("--labels", f.labels, "Proposal label directory")->required();
    ar->add_option("--out", f.out, "Write the JSON report here");
    ar->add_flag("--json", f.json_report, "Also print the JSON report");
    add_eval_flags(ar, f);

    auto* train = app.add_subcommand("train-toy", "Train the toy decoder on the nested-squares corpus");
    train->add_option("--epochs", f.epochs, "Training epochs");
    train->add_option("--lr", f.lr, "Adam learning rate");
    train->add_option("--batch", f.batch, "Minibatch size");
    train->add_option("--images", f.images, "Corpus size");
    train->add_option("--out", f.out, "Checkpoint path");
    train->add_option("--metrics", f.metrics, "JSON-lines metrics path");

    auto* grad = app.add_subcommand("gradcheck", "Compare decoder gradients with finite differences");
    grad->add_option("--checkpoint", f.checkpoint, "Checkpoint to check (default: fresh init)");
    grad->add_option("--eps", f.eps, "Finite-difference step");
    grad->add_option("--params", f.params, "Number of sampled parameters");

    auto* synth = app.add_subcommand("synth", "Write synthetic features, GT labels and a manifest");
    synth->add_option("--kind", f.kind, "three-instance | many-parts | nested");
    synth->add_option("--count", f.count, "Number of images")->check(CLI::PositiveNumber);
    synth->add_option("--out", f.out, "Output directory");

    auto* serve = app.add_subcommand("serve", "Serve labels over HTTP");
    serve->add_option("--labels", f.labels, "Label directory");
    serve->add_option("--host", f.host, "Bind address");
    serve->add_option("--port", f.port, "Port (0 picks a free one)");

    app.require_subcommand(0, 1);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (args.empty()) {
        out << app.help();
        return 2;
    }
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << "ugs 0.1.0\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        err << Json{{"error", e.what()}, {"kind", "usage"}}.dump() << "\n";
        return 2;
    }

    try {
        CliConfig cfg = default_cli_config();
        if (f.config_path) {
            std::ifstream in(*f.config_path);
            if (!in) throw IoError("cannot open config " + *f.config_path);
            Json j;
            try {
                j = Json::parse(in);
            } catch (const nlohmann::json::parse_error& e) {
                throw FormatError(*f.config_path + ": " + e.what());
            }
            apply_config_json(cfg, j);
        }
        apply_flags(cfg, f);
        validate(cfg);

        if (f.print_config) {
            out << config_to_json(cfg).dump(2) << "\n";
            return 0;
        }
        if (app.get_subcommands().empty()) {
            out << app.help();
            return 2;
        }
        err << "config " << config_to_json(cfg).dump() << "\n";

        if (gen->parsed()) return cmd_gen_labels(cfg, f, out, err);
        if (noc->parsed()) return cmd_eval_noc(cfg, f, out);
        if (ar->parsed()) return cmd_eval_ar(cfg, f, out);
        if (train->parsed()) return cmd_train_toy(cfg, f, out);
        if (grad->parsed()) return cmd_gradcheck(cfg, f, out);
        if (synth->parsed()) return cmd_synth(cfg, f, out);
        if (serve->parsed()) return cmd_serve(f, out);
        return 2;
    } catch (const Error& e) {
        err << Json{{"error", e.what()}, {"kind", e.kind()}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << Json{{"error", e.what()}, {"kind", "internal"}}.dump() << "\n";
        return 1;
    }
}

}  // namespace ugs
