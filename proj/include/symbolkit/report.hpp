#ifndef SYMBOLKIT_REPORT_HPP
#define SYMBOLKIT_REPORT_HPP

#include "detail/binary.hpp"
#include "error.hpp"
#include "metrics.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

/**
 * @file report.hpp
 *
 * @brief CSV tables and dependency-free SVG charts for experiment results.
 *
 * Output is a pure function of the inputs (fixed number formatting, no timestamps), so
 * re-running an experiment reproduces every file byte for byte.
 */

namespace symbolkit::report {

/// Shortest round-trip decimal form of a double.
inline std::string format_number(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    std::array<char, 64> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

/// Fixed-precision form used inside SVG documents.
inline std::string format_fixed(double v, int digits = 3) {
    std::array<char, 64> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::fixed, digits);
    return std::string(buf.data(), res.ptr);
}

class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

    void add_row(std::vector<std::string> cells) {
        if (cells.size() != header_.size()) {
            throw InvalidArgument("CsvTable: row has " + std::to_string(cells.size()) + " cells, header has " +
                                  std::to_string(header_.size()));
        }
        rows_.push_back(std::move(cells));
    }

    const std::vector<std::string>& header() const { return header_; }
    const std::vector<std::vector<std::string>>& rows() const { return rows_; }

    std::string to_csv() const {
        std::string out;
        append_line(out, header_);
        for (const auto& r : rows_) {
            append_line(out, r);
        }
        return out;
    }

    void write(const std::filesystem::path& path) const { symbolkit::detail::write_text(path, to_csv()); }

private:
    static std::string escape(const std::string& cell) {
        if (cell.find_first_of(",\"\n") == std::string::npos) {
            return cell;
        }
        std::string out = "\"";
        for (char c : cell) {
            if (c == '"') {
                out += '"';
            }
            out += c;
        }
        return out + "\"";
    }

    static void append_line(std::string& out, const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) {
                out += ',';
            }
            out += escape(cells[i]);
        }
        out += '\n';
    }

    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

/// Minimal CSV reader for the tables this library writes (quoted cells supported).
inline CsvTable parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> lines;
    std::vector<std::string> cur;
    std::string cell;
    bool quoted = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
                cell += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cell += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            cur.push_back(std::move(cell));
            cell.clear();
        } else if (c == '\n') {
            cur.push_back(std::move(cell));
            cell.clear();
            lines.push_back(std::move(cur));
            cur.clear();
        } else {
            cell += c;
        }
    }
    if (!cell.empty() || !cur.empty()) {
        cur.push_back(std::move(cell));
        lines.push_back(std::move(cur));
    }
    if (lines.empty()) {
        throw FormatError("empty CSV");
    }
    CsvTable t(lines[0]);
    for (std::size_t i = 1; i < lines.size(); ++i) {
        t.add_row(lines[i]);
    }
    return t;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
    return parse_csv(symbolkit::detail::read_text(path));
}

namespace svg {

inline constexpr std::array<const char*, 6> palette{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&':
            out += "&amp;";
            break;
        case '<':
            out += "&lt;";
            break;
        case '>':
            out += "&gt;";
            break;
        case '"':
            out += "&quot;";
            break;
        default:
            out += c;
        }
    }
    return out;
}

struct Series {
    std::string name;
    std::vector<double> values; ///< one per category
};

/// Grouped vertical bar chart; the value axis spans [0, max(1, largest value)].
inline std::string bar_chart(const std::string& title, const std::vector<std::string>& categories,
                             const std::vector<Series>& series, const std::string& y_label = "") {
    constexpr double width = 640, height = 400, left = 60, right = 20, top = 40, bottom = 60;
    double ymax = 1.0;
    for (const auto& s : series) {
        for (double v : s.values) {
            if (std::isfinite(v)) {
                ymax = std::max(ymax, v);
            }
        }
    }
    const double plot_w = width - left - right, plot_h = height - top - bottom;
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
    out += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
    out += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" + escape(title) + "</text>\n";
    out += "<line x1=\"" + format_fixed(left) + "\" y1=\"" + format_fixed(top + plot_h) + "\" x2=\"" +
           format_fixed(left + plot_w) + "\" y2=\"" + format_fixed(top + plot_h) + "\" stroke=\"black\"/>\n";
    out += "<line x1=\"" + format_fixed(left) + "\" y1=\"" + format_fixed(top) + "\" x2=\"" + format_fixed(left) +
           "\" y2=\"" + format_fixed(top + plot_h) + "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = ymax * t / 4.0;
        const double y = top + plot_h - plot_h * t / 4.0;
        out += "<text x=\"" + format_fixed(left - 6) + "\" y=\"" + format_fixed(y + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + format_fixed(v, 2) + "</text>\n";
    }
    if (!y_label.empty()) {
        out += "<text x=\"14\" y=\"" + format_fixed(top + plot_h / 2) + "\" transform=\"rotate(-90 14 " +
               format_fixed(top + plot_h / 2) + ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
               escape(y_label) + "</text>\n";
    }
    const std::size_t nc = std::max<std::size_t>(1, categories.size());
    const std::size_t ns = std::max<std::size_t>(1, series.size());
    const double group_w = plot_w / static_cast<double>(nc);
    const double bar_w = group_w * 0.8 / static_cast<double>(ns);
    for (std::size_t c = 0; c < categories.size(); ++c) {
        const double gx = left + group_w * static_cast<double>(c);
        for (std::size_t s = 0; s < series.size(); ++s) {
            if (c >= series[s].values.size() || !std::isfinite(series[s].values[c])) {
                continue;
            }
            const double v = series[s].values[c];
            const double h = plot_h * v / ymax;
            out += "<rect x=\"" + format_fixed(gx + group_w * 0.1 + bar_w * static_cast<double>(s)) + "\" y=\"" +
                   format_fixed(top + plot_h - h) + "\" width=\"" + format_fixed(bar_w) + "\" height=\"" + format_fixed(h) +
                   "\" fill=\"" + palette[s % palette.size()] + "\"/>\n";
        }
        out += "<text x=\"" + format_fixed(gx + group_w / 2) + "\" y=\"" + format_fixed(top + plot_h + 18) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + escape(categories[c]) + "</text>\n";
    }
    for (std::size_t s = 0; s < series.size(); ++s) {
        const double lx = left + 10 + 150.0 * static_cast<double>(s);
        out += "<rect x=\"" + format_fixed(lx) + "\" y=\"" + format_fixed(height - 22) + "\" width=\"10\" height=\"10\" fill=\"" +
               palette[s % palette.size()] + "\"/>\n";
        out += "<text x=\"" + format_fixed(lx + 14) + "\" y=\"" + format_fixed(height - 13) +
               "\" font-family=\"sans-serif\" font-size=\"11\">" + escape(series[s].name) + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

struct ScatterGroup {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

/// Scatter plot over [0, 1] x [0, 1] (ESS values), one colour per group.
inline std::string scatter(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<ScatterGroup>& groups) {
    constexpr double size = 400, margin = 50;
    const double plot = size - 2 * margin;
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"400\" height=\"400\" viewBox=\"0 0 400 400\">\n";
    out += "<rect width=\"400\" height=\"400\" fill=\"white\"/>\n";
    out += "<text x=\"200\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" + escape(title) + "</text>\n";
    out += "<rect x=\"50\" y=\"50\" width=\"300\" height=\"300\" fill=\"none\" stroke=\"black\"/>\n";
    out += "<text x=\"200\" y=\"385\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + escape(x_label) + "</text>\n";
    out += "<text x=\"16\" y=\"200\" transform=\"rotate(-90 16 200)\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
           escape(y_label) + "</text>\n";
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (const auto& [x, y] : groups[g].points) {
            const double px = margin + plot * std::clamp(x, 0.0, 1.0);
            const double py = margin + plot * (1.0 - std::clamp(y, 0.0, 1.0));
            out += "<circle cx=\"" + format_fixed(px) + "\" cy=\"" + format_fixed(py) + "\" r=\"2\" fill=\"" +
                   palette[g % palette.size()] + "\" fill-opacity=\"0.6\"/>\n";
        }
        out += "<text x=\"" + format_fixed(60 + 120.0 * static_cast<double>(g)) + "\" y=\"44\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" +
               palette[g % palette.size()] + "\">" + escape(groups[g].name) + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

} // namespace svg

struct LayerAccuracy {
    int layer_id = 0;
    double accuracy = 0.0;
    std::size_t n = 0;
};

struct NamedScore {
    std::string name;
    double value = 0.0;
};

struct OodPoint {
    std::array<double, 3> ess{}; ///< ESS in the three non-deepest layers
    bool ood = false;
};

/// Everything the experiment subcommands produce; empty members render as header-only tables.
struct ExperimentResults {
    std::vector<LayerAccuracy> label_accuracy;     ///< symbol-based prediction of labels per layer
    std::vector<LayerAccuracy> decision_accuracy;  ///< symbol-based prediction of model decisions per layer
    std::vector<NamedScore> ess_auroc;             ///< correct vs incorrect, per layer and norm
    std::vector<NamedScore> ood_auroc;             ///< in-distribution vs OOD, per layer and norm
    std::vector<OodPoint> ood_points;
    std::array<int, 3> ood_layers{1, 2, 3};
    std::vector<NamedScore> adversarial_auroc;     ///< ESS norm and decision-based ESS norm
    std::vector<NamedScore> adversarial_accuracy;  ///< symbol-based vs model accuracy on adversarial inputs
    std::vector<NamedScore> adversarial_counts;    ///< included / excluded ROI counts
    std::vector<double> templearn_accuracy;        ///< one per resample
    std::vector<int> sweep_layers;
    std::vector<std::size_t> sweep_ks;
    std::map<std::pair<int, std::size_t>, double> sweep_accuracy; ///< (layer, k) -> accuracy
};

enum class Format { csv, svg, both };

inline Format parse_format(const std::string& s) {
    if (s == "csv") {
        return Format::csv;
    }
    if (s == "svg") {
        return Format::svg;
    }
    if (s == "both") {
        return Format::both;
    }
    throw InvalidArgument("unknown report format '" + s + "' (csv|svg|both)");
}

inline CsvTable accuracy_table(const std::vector<LayerAccuracy>& rows) {
    CsvTable t({"layer", "accuracy", "n"});
    for (const auto& r : rows) {
        t.add_row({std::to_string(r.layer_id), format_number(r.accuracy), std::to_string(r.n)});
    }
    return t;
}

inline CsvTable score_table(const std::vector<NamedScore>& rows, const std::string& value_name) {
    CsvTable t({"score", value_name});
    for (const auto& r : rows) {
        t.add_row({r.name, format_number(r.value)});
    }
    return t;
}

/// Layers x k grid of fixed-k accuracies.
inline CsvTable sweep_table(const ExperimentResults& r) {
    std::vector<std::string> header{"layer"};
    for (auto k : r.sweep_ks) {
        header.push_back("k" + std::to_string(k));
    }
    CsvTable t(header);
    for (int layer : r.sweep_layers) {
        std::vector<std::string> row{std::to_string(layer)};
        for (auto k : r.sweep_ks) {
            auto it = r.sweep_accuracy.find({layer, k});
            row.push_back(it == r.sweep_accuracy.end() ? "" : format_number(it->second));
        }
        t.add_row(std::move(row));
    }
    return t;
}

inline CsvTable templearn_table(const std::vector<double>& acc) {
    CsvTable t({"resample", "accuracy"});
    for (std::size_t i = 0; i < acc.size(); ++i) {
        t.add_row({std::to_string(i), format_number(acc[i])});
    }
    return t;
}

inline CsvTable ood_points_table(const ExperimentResults& r) {
    CsvTable t({"condition", "ess_l" + std::to_string(r.ood_layers[0]), "ess_l" + std::to_string(r.ood_layers[1]),
                "ess_l" + std::to_string(r.ood_layers[2])});
    for (const auto& p : r.ood_points) {
        t.add_row({p.ood ? "ood" : "in_dist", format_number(p.ess[0]), format_number(p.ess[1]), format_number(p.ess[2])});
    }
    return t;
}

/// Writes every table (CSV) and/or chart (SVG) into `dir`; returns the file names written, sorted.
inline std::vector<std::string> write_report(const ExperimentResults& r, const std::filesystem::path& dir, Format format) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> written;
    const bool csv = format != Format::svg;
    const bool svg_out = format != Format::csv;
    auto put_csv = [&](const std::string& name, const CsvTable& t) {
        if (csv) {
            t.write(dir / name);
            written.push_back(name);
        }
    };
    auto put_svg = [&](const std::string& name, const std::string& doc) {
        if (svg_out) {
            symbolkit::detail::write_text(dir / name, doc);
            written.push_back(name);
        }
    };
    auto layer_bars = [](const std::vector<LayerAccuracy>& rows, std::vector<std::string>& cats) {
        svg::Series s{"accuracy", {}};
        for (const auto& a : rows) {
            cats.push_back("L" + std::to_string(a.layer_id));
            s.values.push_back(a.accuracy);
        }
        return s;
    };
    auto score_bars = [](const std::vector<NamedScore>& rows, std::vector<std::string>& cats, const std::string& name) {
        svg::Series s{name, {}};
        for (const auto& a : rows) {
            cats.push_back(a.name);
            s.values.push_back(a.value);
        }
        return s;
    };

    put_csv("accuracy.csv", accuracy_table(r.label_accuracy));
    put_csv("decision_accuracy.csv", accuracy_table(r.decision_accuracy));
    {
        std::vector<std::string> cats;
        std::vector<svg::Series> series{layer_bars(r.label_accuracy, cats)};
        series[0].name = "labels";
        if (!r.decision_accuracy.empty()) {
            std::vector<std::string> unused;
            auto d = layer_bars(r.decision_accuracy, unused);
            d.name = "model decisions";
            series.push_back(d);
        }
        put_svg("accuracy.svg", svg::bar_chart("Symbol-based prediction accuracy", cats, series, "accuracy"));
    }
    put_csv("ess_auroc.csv", score_table(r.ess_auroc, "auroc"));
    {
        std::vector<std::string> cats;
        auto s = score_bars(r.ess_auroc, cats, "AUROC correct vs incorrect");
        put_svg("ess_auroc.svg", svg::bar_chart("ESS confidence", cats, {s}, "AUROC"));
    }
    put_csv("ood_auroc.csv", score_table(r.ood_auroc, "auroc"));
    if (!r.ood_points.empty()) {
        put_csv("ood_points.csv", ood_points_table(r));
    }
    {
        std::vector<std::string> cats;
        auto s = score_bars(r.ood_auroc, cats, "AUROC in-distribution vs OOD");
        put_svg("ood_auroc.svg", svg::bar_chart("OOD detection", cats, {s}, "AUROC"));
        static constexpr std::array<std::pair<int, int>, 3> projections{{{0, 1}, {0, 2}, {1, 2}}};
        for (const auto& [a, b] : projections) {
            if (r.ood_points.empty()) {
                break; // scatter needs three shallow layers
            }
            svg::ScatterGroup in{"in-distribution", {}}, out{"OOD", {}};
            for (const auto& p : r.ood_points) {
                (p.ood ? out : in).points.emplace_back(p.ess[static_cast<std::size_t>(a)], p.ess[static_cast<std::size_t>(b)]);
            }
            const auto la = "ESS L" + std::to_string(r.ood_layers[static_cast<std::size_t>(a)]);
            const auto lb = "ESS L" + std::to_string(r.ood_layers[static_cast<std::size_t>(b)]);
            put_svg("ood_scatter_l" + std::to_string(r.ood_layers[static_cast<std::size_t>(a)]) + "_l" +
                        std::to_string(r.ood_layers[static_cast<std::size_t>(b)]) + ".svg",
                    svg::scatter("ESS, " + la + " vs " + lb, la, lb, {in, out}));
        }
    }
    put_csv("adv_auroc.csv", score_table(r.adversarial_auroc, "auroc"));
    put_csv("adv_accuracy.csv", score_table(r.adversarial_accuracy, "accuracy"));
    put_csv("adv_counts.csv", score_table(r.adversarial_counts, "count"));
    {
        std::vector<std::string> cats;
        auto s = score_bars(r.adversarial_auroc, cats, "AUROC clean vs adversarial");
        put_svg("adv_auroc.svg", svg::bar_chart("Adversarial detection", cats, {s}, "AUROC"));
        std::vector<std::string> cats2;
        auto s2 = score_bars(r.adversarial_accuracy, cats2, "accuracy");
        put_svg("adv_accuracy.svg", svg::bar_chart("Accuracy on adversarial inputs", cats2, {s2}, "accuracy"));
    }
    put_csv("templearn.csv", templearn_table(r.templearn_accuracy));
    {
        std::vector<std::string> cats;
        svg::Series s{"accuracy", {}};
        for (std::size_t i = 0; i < r.templearn_accuracy.size(); ++i) {
            cats.push_back(i % 10 == 0 ? std::to_string(i) : "");
            s.values.push_back(r.templearn_accuracy[i]);
        }
        const auto m = metrics::mean(r.templearn_accuracy);
        put_svg("templearn.svg", svg::bar_chart("Temporary learning, mean " + format_fixed(m, 3), cats, {s}, "accuracy"));
    }
    if (!r.sweep_ks.empty()) {
        put_csv("sweep.csv", sweep_table(r));
        std::vector<std::string> cats;
        for (int l : r.sweep_layers) {
            cats.push_back("L" + std::to_string(l));
        }
        std::vector<svg::Series> series;
        for (auto k : r.sweep_ks) {
            svg::Series s{"k=" + std::to_string(k), {}};
            for (int l : r.sweep_layers) {
                auto it = r.sweep_accuracy.find({l, k});
                s.values.push_back(it == r.sweep_accuracy.end() ? std::nan("") : it->second);
            }
            series.push_back(std::move(s));
        }
        put_svg("sweep.svg", svg::bar_chart("Fixed-k symbol prediction", cats, series, "accuracy"));
    }
    std::sort(written.begin(), written.end());
    return written;
}

} // namespace symbolkit::report

#endif
