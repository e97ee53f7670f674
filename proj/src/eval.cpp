#include "ugs/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "ugs/error.hpp"

namespace ugs {

namespace {

const Click* first_positive(std::span<const Click> clicks) {
    for (const auto& c : clicks) {
        if (c.positive) return &c;
    }
    return nullptr;
}

Click argmax_distance(const BinaryMask& m) {
    const auto d = distance_transform(m);
    std::size_t best = 0;
    for (std::size_t i = 1; i < d.size(); ++i) {
        if (d[i] > d[best]) best = i;
    }
    Click c;
    c.y = static_cast<int>(best / static_cast<std::size_t>(m.width()));
    c.x = static_cast<int>(best % static_cast<std::size_t>(m.width()));
    return c;
}

double snap(double v) { return std::round(v * 1e10) / 1e10; }

// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn fn) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

bool better_session(const ClickSession& a, const ClickSession& b) {
    if (a.noc != b.noc) return a.noc < b.noc;
    if (a.failed != b.failed) return !a.failed;
    if (a.final_iou() != b.final_iou()) return a.final_iou() > b.final_iou();
    return a.g_used < b.g_used;
}

Json grid_json(std::span<const double> grid) { return Json(std::vector<double>(grid.begin(), grid.end())); }

std::string target_label(double t) { return fmt::format("NoC{}", static_cast<int>(std::lround(t * 100))); }

}  // namespace

void OracleSegmenter::add(const std::string& image_id, std::vector<BinaryMask> gts) {
    gts_[image_id] = std::move(gts);
}

BinaryMask OracleSegmenter::predict(const ImageRef& image, std::span<const Click>, double) const {
    const auto it = gts_.find(image.image_id);
    if (it == gts_.end() || image.instance >= it->second.size()) {
        throw InvalidArgument("oracle has no GT for " + image.image_id);
    }
    return it->second[image.instance];
}

BinaryMask EmptySegmenter::predict(const ImageRef& image, std::span<const Click>, double) const {
    return BinaryMask(image.height, image.width);
}

void HierarchySegmenter::add(PseudoLabelSet labels) {
    const std::string id = labels.image_id;
    labels_[id] = std::move(labels);
}

HierarchySegmenter HierarchySegmenter::from_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("label directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    HierarchySegmenter seg;
    for (const auto& f : files) seg.add(read_labels(f));
    return seg;
}

BinaryMask HierarchySegmenter::predict(const ImageRef& image, std::span<const Click> clicks, double g) const {
    const auto it = labels_.find(image.image_id);
    if (it == labels_.end()) throw InvalidArgument("no pseudo-labels for image " + image.image_id);
    const Click* point = first_positive(clicks);
    if (point == nullptr) return BinaryMask(image.height, image.width);
    const auto found = query_mask(it->second, point->x, point->y, g, clicks);
    if (!found) return BinaryMask(it->second.height, it->second.width);
    return found->mask;
}

Click initial_click(const BinaryMask& gt) {
    if (!gt.any()) throw InvalidArgument("initial click needs a nonempty GT mask");
    return argmax_distance(gt);
}

Click next_click(const BinaryMask& pred, const BinaryMask& gt) {
    if (!pred.same_shape(gt)) throw DimensionError("prediction and GT shapes differ");
    if (pred == gt) throw InvalidArgument("prediction already equals GT");
    const BinaryMask fn = difference(gt, pred);
    const BinaryMask fp = difference(pred, gt);
    const BinaryMask* best = nullptr;
    bool positive = true;
    std::size_t best_area = 0;
    const auto fn_parts = connected_components(fn);
    const auto fp_parts = connected_components(fp);
    for (const auto& c : fn_parts) {
        if (area(c) > best_area) {
            best_area = area(c);
            best = &c;
            positive = true;
        }
    }
    for (const auto& c : fp_parts) {
        if (area(c) > best_area) {
            best_area = area(c);
            best = &c;
            positive = false;
        }
    }
    Click click = argmax_distance(*best);
    click.positive = positive;
    return click;
}

ClickSession simulate_session(const Segmenter& seg, const ImageRef& image, const BinaryMask& gt, double g,
                              double iou_target, int max_clicks) {
    if (!gt.any()) throw InvalidArgument("session needs a nonempty GT mask");
    if (max_clicks < 1) throw InvalidArgument("max_clicks must be at least 1");
    ClickSession s;
    s.g_used = g;
    s.clicks.push_back(initial_click(gt));
    while (true) {
        const BinaryMask pred = seg.predict(image, s.clicks, g);
        if (!pred.same_shape(gt)) throw DimensionError("segmenter returned a mask of the wrong shape");
        s.ious.push_back(iou(pred, gt));
        if (s.ious.back() >= iou_target) {
            s.noc = static_cast<int>(s.clicks.size());
            return s;
        }
        if (static_cast<int>(s.clicks.size()) >= max_clicks) break;
        s.clicks.push_back(next_click(pred, gt));
    }
    s.noc = max_clicks;
    s.failed = true;
    return s;
}

ClickSession sweep_best(const Segmenter& seg, const ImageRef& image, const BinaryMask& gt,
                        std::span<const double> g_grid, double iou_target, int max_clicks) {
    if (g_grid.empty()) throw InvalidArgument("granularity grid is empty");
    std::optional<ClickSession> best;
    for (double g : g_grid) {
        ClickSession s = simulate_session(seg, image, gt, g, iou_target, max_clicks);
        if (!best || better_session(s, *best)) best = std::move(s);
    }
    return *best;
}

double one_click_iou(const Segmenter& seg, const ImageRef& image, const BinaryMask& gt,
                     std::span<const double> g_grid) {
    if (g_grid.empty()) throw InvalidArgument("granularity grid is empty");
    const Click c = initial_click(gt);
    double best = 0.0;
    for (double g : g_grid) best = std::max(best, iou(seg.predict(image, std::span(&c, 1), g), gt));
    return best;
}

std::vector<double> parse_grid(const std::string& text) {
    auto number = [&](const std::string& s) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(s, &used);
        } catch (const std::exception&) {
            throw InvalidArgument("bad grid value '" + s + "'");
        }
        if (used != s.size() || !std::isfinite(v)) throw InvalidArgument("bad grid value '" + s + "'");
        return v;
    };
    std::vector<double> out;
    if (text.find(':') != std::string::npos) {
        std::vector<std::string> parts;
        std::stringstream ss(text);
        for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
        if (parts.size() != 3) throw InvalidArgument("grid must be start:stop:step");
        const double start = number(parts[0]);
        const double stop = number(parts[1]);
        const double step = number(parts[2]);
        if (step <= 0.0 || stop < start) throw InvalidArgument("grid needs step > 0 and stop >= start");
        const auto count = static_cast<long>(std::floor((stop - start) / step + 1e-9));
        for (long i = 0; i <= count; ++i) out.push_back(snap(start + static_cast<double>(i) * step));
    } else {
        std::stringstream ss(text);
        for (std::string p; std::getline(ss, p, ',');) out.push_back(snap(number(p)));
    }
    if (out.empty()) throw InvalidArgument("granularity grid is empty");
    for (double g : out) {
        if (g < 0.1 || g > 1.0) throw InvalidArgument(fmt::format("grid value {} outside [0.1, 1.0]", g));
    }
    return out;
}

std::vector<double> recall_thresholds() {
    std::vector<double> t;
    for (int k = 10; k <= 19; ++k) t.push_back(k / 20.0);
    return t;
}

std::size_t greedy_matches(std::span<const ScoredMask> proposals, std::span<const BinaryMask> gts,
                           double threshold, std::size_t max_dets) {
    std::vector<std::size_t> order(proposals.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return proposals[a].confidence > proposals[b].confidence;
    });
    if (order.size() > max_dets) order.resize(max_dets);
    std::vector<bool> taken(gts.size(), false);
    std::size_t matched = 0;
    for (std::size_t p : order) {
        std::optional<std::size_t> best;
        double best_iou = threshold;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g]) continue;
            const double v = iou(proposals[p].mask, gts[g]);
            if (v >= best_iou && (!best || v > best_iou)) {
                best = g;
                best_iou = v;
            }
        }
        if (best) {
            taken[*best] = true;
            ++matched;
        }
    }
    return matched;
}

double average_recall(std::span<const ScoredMask> proposals, std::span<const BinaryMask> gts,
                      std::size_t max_dets) {
    if (gts.empty()) throw InvalidArgument("average recall needs at least one GT mask");
    double sum = 0.0;
    const auto thresholds = recall_thresholds();
    for (double t : thresholds) {
        sum += static_cast<double>(greedy_matches(proposals, gts, t, max_dets)) / static_cast<double>(gts.size());
    }
    return sum / static_cast<double>(thresholds.size());
}

Manifest load_manifest(const std::filesystem::path& path, bool check_features) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    Json j;
    try {
        j = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    const auto base = path.parent_path();
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path fp(p);
        return fp.is_absolute() ? fp : base / fp;
    };
    Manifest m;
    try {
        m.name = j.at("name").get<std::string>();
        for (const auto& it : j.at("items")) {
            ManifestItem item;
            item.image_id = it.at("image_id").get<std::string>();
            item.features = resolve(it.at("features").get<std::string>());
            item.gt_labels = resolve(it.at("gt_labels").get<std::string>());
            m.items.push_back(std::move(item));
        }
        if (j.contains("targets")) m.targets = j.at("targets").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (m.items.empty()) throw InvalidArgument("manifest " + path.string() + " has no items");
    for (double t : m.targets) {
        if (!(t > 0.0 && t <= 1.0)) throw InvalidArgument("IoU targets must lie in (0, 1]");
    }
    std::vector<std::string> missing;
    for (const auto& item : m.items) {
        if (!std::filesystem::exists(item.gt_labels)) missing.push_back(item.gt_labels.string());
        if (check_features && !std::filesystem::exists(item.features)) missing.push_back(item.features.string());
    }
    if (!missing.empty()) {
        std::string msg = "manifest references missing files:";
        for (const auto& f : missing) msg += "\n  " + f;
        throw IoError(msg);
    }
    return m;
}

Json BenchmarkReport::to_json() const {
    Json j;
    j["dataset"] = dataset;
    j["instances"] = instances;
    Json noc = Json::object();
    Json fails = Json::object();
    for (std::size_t t = 0; t < targets.size(); ++t) {
        noc[target_label(targets[t])] = mean_noc[t];
        fails[target_label(targets[t])] = failures[t];
    }
    j["noc"] = std::move(noc);
    j["failures"] = std::move(fails);
    j["one_click_iou"] = mean_one_click_iou;
    Json rows = Json::array();
    for (const auto& r : per_instance) {
        Json row;
        row["image_id"] = r.image_id;
        row["instance"] = r.instance;
        row["noc"] = r.noc;
        row["failed"] = r.failed;
        row["g_used"] = r.g_used;
        row["one_click_iou"] = r.one_click_iou;
        rows.push_back(std::move(row));
    }
    j["per_instance"] = std::move(rows);
    j["config"] = config;
    return j;
}

std::string BenchmarkReport::to_table() const {
    std::string head = fmt::format("{:<16}", "dataset");
    std::string row = fmt::format("{:<16}", dataset);
    for (std::size_t t = 0; t < targets.size(); ++t) {
        head += fmt::format(" {:>8}", target_label(targets[t]));
        row += fmt::format(" {:>8.2f}", mean_noc[t]);
    }
    head += fmt::format(" {:>8} {:>9}", "1-IoU", "instances");
    row += fmt::format(" {:>8.2f} {:>9}", 100.0 * mean_one_click_iou, instances);
    return head + "\n" + row + "\n";
}

BenchmarkReport run_benchmark(const Segmenter& seg, const Manifest& manifest, const BenchmarkConfig& cfg) {
    if (cfg.g_grid.empty()) throw InvalidArgument("granularity grid is empty");
    if (cfg.max_clicks < 1) throw InvalidArgument("max_clicks must be at least 1");
    const std::vector<double> targets = cfg.targets.value_or(manifest.targets);
    if (targets.empty()) throw InvalidArgument("no IoU targets");

    struct Task {
        ImageRef image;
        BinaryMask gt;
    };
    std::vector<Task> tasks;
    for (const auto& item : manifest.items) {
        const PseudoLabelSet gt = read_labels(item.gt_labels);
        auto masks = flatten_masks(gt);
        for (std::size_t k = 0; k < masks.size(); ++k) {
            if (!masks[k].any()) continue;
            tasks.push_back({ImageRef{item.image_id, gt.height, gt.width, item.features, k}, std::move(masks[k])});
        }
    }
    if (tasks.empty()) throw InvalidArgument("manifest " + manifest.name + " has no GT instances");

    // sessions[task][target][g] and first-click IoU per task and g.
    const std::size_t ng = cfg.g_grid.size();
    std::vector<std::vector<std::vector<ClickSession>>> sessions(tasks.size());
    std::vector<std::vector<double>> first(tasks.size());
    parallel_for(tasks.size(), cfg.jobs, [&](std::size_t i) {
        const auto& task = tasks[i];
        sessions[i].resize(targets.size());
        for (std::size_t t = 0; t < targets.size(); ++t) {
            for (double g : cfg.g_grid) {
                sessions[i][t].push_back(simulate_session(seg, task.image, task.gt, g, targets[t], cfg.max_clicks));
            }
        }
        // The first click of every session is the same, so its IoU is the one-click IoU.
        for (std::size_t gi = 0; gi < ng; ++gi) first[i].push_back(sessions[i][0][gi].ious.front());
    });

    BenchmarkReport report;
    report.dataset = manifest.name;
    report.targets = targets;
    report.instances = tasks.size();
    report.per_instance.resize(tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        report.per_instance[i].image_id = tasks[i].image.image_id;
        report.per_instance[i].instance = tasks[i].image.instance;
    }

    auto record = [&](std::size_t i, const ClickSession& s) {
        auto& r = report.per_instance[i];
        r.noc.push_back(s.noc);
        r.failed.push_back(s.failed);
        r.g_used.push_back(s.g_used);
    };
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (cfg.sweep_mode == SweepMode::per_instance) {
            for (std::size_t i = 0; i < tasks.size(); ++i) {
                const auto& row = sessions[i][t];
                const auto best = std::min_element(row.begin(), row.end(), better_session);
                record(i, *best);
            }
        } else {
            std::size_t best_g = 0;
            double best_noc = 0.0;
            double best_iou = 0.0;
            for (std::size_t gi = 0; gi < ng; ++gi) {
                double noc = 0.0;
                double fiou = 0.0;
                for (std::size_t i = 0; i < tasks.size(); ++i) {
                    noc += sessions[i][t][gi].noc;
                    fiou += sessions[i][t][gi].final_iou();
                }
                if (gi == 0 || noc < best_noc || (noc == best_noc && fiou > best_iou)) {
                    best_g = gi;
                    best_noc = noc;
                    best_iou = fiou;
                }
            }
            for (std::size_t i = 0; i < tasks.size(); ++i) record(i, sessions[i][t][best_g]);
        }
        double sum = 0.0;
        std::size_t fails = 0;
        for (const auto& r : report.per_instance) {
            sum += r.noc[t];
            fails += r.failed[t] ? 1 : 0;
        }
        report.mean_noc.push_back(sum / static_cast<double>(tasks.size()));
        report.failures.push_back(fails);
    }

    if (cfg.sweep_mode == SweepMode::per_instance) {
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            report.per_instance[i].one_click_iou = *std::max_element(first[i].begin(), first[i].end());
        }
    } else {
        std::size_t best_g = 0;
        double best_sum = -1.0;
        for (std::size_t gi = 0; gi < ng; ++gi) {
            double s = 0.0;
            for (std::size_t i = 0; i < tasks.size(); ++i) s += first[i][gi];
            if (s > best_sum) {
                best_sum = s;
                best_g = gi;
            }
        }
        for (std::size_t i = 0; i < tasks.size(); ++i) report.per_instance[i].one_click_iou = first[i][best_g];
    }
    double iou_sum = 0.0;
    for (const auto& r : report.per_instance) iou_sum += r.one_click_iou;
    report.mean_one_click_iou = iou_sum / static_cast<double>(tasks.size());

    report.config["g_grid"] = grid_json(cfg.g_grid);
    report.config["targets"] = targets;
    report.config["max_clicks"] = cfg.max_clicks;
    report.config["sweep"] = cfg.sweep_mode == SweepMode::per_instance ? "per_instance" : "per_dataset";
    return report;
}

Json ArReport::to_json() const {
    Json j;
    j["dataset"] = dataset;
    j["ar"] = ar;
    j["recall_at"] = recall_at;
    j["thresholds"] = recall_thresholds();
    j["images"] = images;
    j["gt_count"] = gt_count;
    j["config"] = config;
    return j;
}

std::string ArReport::to_table() const {
    const std::size_t dets = config.contains("max_dets") ? config["max_dets"].get<std::size_t>() : 1000;
    std::string out = fmt::format("{:<16} {:>8} {:>7} {:>6}\n", "dataset", fmt::format("AR{}", dets), "images", "gts");
    out += fmt::format("{:<16} {:>8.2f} {:>7} {:>6}\n", dataset, 100.0 * ar, images, gt_count);
    return out;
}

ArReport run_ar(const Manifest& manifest, std::span<const PseudoLabelSet> proposal_labels, const ArConfig& cfg) {
    if (proposal_labels.size() != manifest.items.size()) {
        throw InvalidArgument("need one proposal label set per manifest item");
    }
    const auto thresholds = recall_thresholds();
    std::vector<std::size_t> matched(thresholds.size(), 0);
    ArReport report;
    report.dataset = manifest.name;
    for (std::size_t i = 0; i < manifest.items.size(); ++i) {
        const auto gts = flatten_masks(read_labels(manifest.items[i].gt_labels));
        const auto proposals =
            aggregate_proposals(proposal_labels[i], cfg.g_grid, cfg.grid_step, cfg.conf_floor, cfg.max_dets);
        for (const auto& p : proposals) {
            if (!gts.empty() && !p.mask.same_shape(gts.front())) {
                throw DimensionError("proposals for " + manifest.items[i].image_id + " do not match GT shape");
            }
        }
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            matched[t] += greedy_matches(proposals, gts, thresholds[t], cfg.max_dets);
        }
        report.gt_count += gts.size();
        ++report.images;
    }
    if (report.gt_count == 0) throw InvalidArgument("average recall needs at least one GT mask");
    double sum = 0.0;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        const double r = static_cast<double>(matched[t]) / static_cast<double>(report.gt_count);
        report.recall_at.push_back(r);
        sum += r;
    }
    report.ar = sum / static_cast<double>(thresholds.size());
    report.config["g_grid"] = grid_json(cfg.g_grid);
    report.config["grid_step"] = cfg.grid_step;
    report.config["conf_floor"] = cfg.conf_floor;
    report.config["max_dets"] = cfg.max_dets;
    return report;
}

}  // namespace ugs
