#include "doremi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace doremi {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : classes_(num_classes),
      m_(static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(num_classes), 0.0) {
    if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(int truth, int prediction, double weight) {
    if (truth < 0 || truth >= classes_ || prediction < 0 || prediction >= classes_)
        throw ConfigError("confusion matrix label out of range");
    m_[static_cast<std::size_t>(truth) * classes_ + prediction] += weight;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw ConfigError("confusion matrix size mismatch");
    for (std::size_t i = 0; i < m_.size(); ++i) m_[i] += other.m_[i];
}

double ConfusionMatrix::at(int truth, int prediction) const {
    return m_[static_cast<std::size_t>(truth) * classes_ + prediction];
}

double ConfusionMatrix::total() const {
    double t = 0.0;
    for (double v : m_) t += v;
    return t;
}

std::vector<double> ConfusionMatrix::per_class_iou() const {
    std::vector<double> iou(static_cast<std::size_t>(classes_),
                            std::numeric_limits<double>::quiet_NaN());
    for (int c = 0; c < classes_; ++c) {
        double tp = at(c, c), fn = 0.0, fp = 0.0, gt = 0.0;
        for (int j = 0; j < classes_; ++j) {
            gt += at(c, j);
            if (j != c) {
                fn += at(c, j);
                fp += at(j, c);
            }
        }
        if (gt > 0.0) iou[static_cast<std::size_t>(c)] = tp / (tp + fp + fn);
    }
    return iou;
}

double ConfusionMatrix::miou() const {
    auto iou = per_class_iou();
    double s = 0.0;
    int n = 0;
    for (double v : iou) {
        if (!std::isnan(v)) {
            s += v;
            ++n;
        }
    }
    return n > 0 ? s / n : 0.0;
}

double ConfusionMatrix::macc() const {
    double s = 0.0;
    int n = 0;
    for (int c = 0; c < classes_; ++c) {
        double gt = 0.0;
        for (int j = 0; j < classes_; ++j) gt += at(c, j);
        if (gt > 0.0) {
            s += at(c, c) / gt;
            ++n;
        }
    }
    return n > 0 ? s / n : 0.0;
}

double ConfusionMatrix::all_acc() const {
    const double t = total();
    if (t <= 0.0) return 0.0;
    double trace = 0.0;
    for (int c = 0; c < classes_; ++c) trace += at(c, c);
    return trace / t;
}

double alpha_metric(const std::vector<double>& counts) {
    if (counts.empty()) throw ConfigError("alpha metric needs at least one count");
    double total = 0.0;
    for (double v : counts) total += v;
    if (total <= 0.0) throw ConfigError("alpha metric is undefined for all-zero counts");
    const double k = static_cast<double>(counts.size());
    const double mean = total / k;
    double var = 0.0;
    for (double v : counts) var += (v - mean) * (v - mean);
    var /= k;
    return std::sqrt(var) / mean;
}

void save_trace_csv(const std::string& path, const std::vector<TraceRow>& rows) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open trace file for writing: " + path);
    out << "token,domain_id,entropy,k,active\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.entropy);
        out << r.token << ',' << r.domain_id << ',' << buf << ',' << r.k << ',';
        for (std::size_t i = 0; i < r.active.size(); ++i) {
            if (i) out << '|';
            out << r.active[i];
        }
        out << '\n';
    }
}

std::vector<TraceRow> load_trace_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open trace file: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "token,domain_id,entropy,k,active")
        throw FormatError("bad trace header in " + path);
    std::vector<TraceRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        TraceRow r;
        std::getline(ss, field, ',');
        r.token = std::stoi(field);
        std::getline(ss, field, ',');
        r.domain_id = std::stoi(field);
        std::getline(ss, field, ',');
        r.entropy = std::stod(field);
        std::getline(ss, field, ',');
        r.k = std::stoi(field);
        std::getline(ss, field, ',');
        std::stringstream as(field);
        std::string tok;
        while (std::getline(as, tok, '|'))
            if (!tok.empty()) r.active.push_back(std::stoi(tok));
        if (static_cast<int>(r.active.size()) != r.k)
            throw FormatError("trace row active-set size disagrees with k in " + path);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::map<int, std::vector<double>> expert_utilization(const std::vector<TraceRow>& traces,
                                                      int num_experts) {
    std::map<int, std::vector<double>> hist;
    std::map<int, double> totals;
    for (const auto& r : traces) {
        auto& h = hist.try_emplace(r.domain_id, static_cast<std::size_t>(num_experts), 0.0)
                      .first->second;
        for (int j : r.active) {
            if (j < 0 || j >= num_experts) throw FormatError("trace expert id out of range");
            h[static_cast<std::size_t>(j)] += 1.0;
            totals[r.domain_id] += 1.0;
        }
    }
    for (auto& [domain, h] : hist) {
        const double t = totals[domain];
        if (t > 0.0)
            for (auto& v : h) v /= t;
    }
    return hist;
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string json_array(const std::vector<double>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ", ";
        s += std::isnan(v[i]) ? std::string("null") : fmt(v[i]);
    }
    return s + "]";
}

}  // namespace

std::string MetricsReport::to_json() const {
    std::string s = "{\n";
    s += "  \"miou\": " + fmt(miou) + ",\n";
    s += "  \"macc\": " + fmt(macc) + ",\n";
    s += "  \"all_acc\": " + fmt(all_acc) + ",\n";
    s += "  \"per_class_iou\": " + json_array(per_class_iou) + ",\n";
    s += "  \"alpha\": " + fmt(alpha) + ",\n";
    s += "  \"expert_counts\": " + json_array(expert_counts) + ",\n";
    s += "  \"utilization\": {";
    bool first = true;
    for (const auto& [domain, h] : utilization) {
        if (!first) s += ",";
        first = false;
        s += "\n    \"" + std::to_string(domain) + "\": " + json_array(h);
    }
    s += first ? "},\n" : "\n  },\n";
    s += "  \"activated_params\": " + std::to_string(activated_params) + ",\n";
    s += "  \"throughput_scenes_per_s\": " + fmt(throughput_scenes_per_s) + ",\n";
    s += "  \"evaluated_points\": " + std::to_string(evaluated_points) + "\n";
    s += "}\n";
    return s;
}

void save_report(const MetricsReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open report for writing: " + path);
    out << report.to_json();
}

void save_utilization_csv(const std::map<int, std::vector<double>>& utilization,
                          const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open histogram csv for writing: " + path);
    out << "domain_id,expert,fraction\n";
    for (const auto& [domain, h] : utilization)
        for (std::size_t j = 0; j < h.size(); ++j)
            out << domain << ',' << j << ',' << fmt(h[j]) << '\n';
}

void save_utilization_svg(const std::map<int, std::vector<double>>& utilization,
                          const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open svg for writing: " + path);
    const int bar_w = 18, gap = 4, row_h = 90, left = 40;
    int max_bars = 0;
    for (const auto& [d, h] : utilization) max_bars = std::max(max_bars, static_cast<int>(h.size()));
    const int width = left + max_bars * (bar_w + gap) + 20;
    const int height = static_cast<int>(utilization.size()) * (row_h + 30) + 10;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\">\n";
    int row = 0;
    for (const auto& [domain, h] : utilization) {
        const int base = 10 + row * (row_h + 30) + row_h;
        out << "<text x=\"4\" y=\"" << base - row_h / 2 << "\" font-size=\"11\">d" << domain
            << "</text>\n";
        for (std::size_t j = 0; j < h.size(); ++j) {
            const int bh = static_cast<int>(h[j] * row_h);
            const int x = left + static_cast<int>(j) * (bar_w + gap);
            out << "<rect x=\"" << x << "\" y=\"" << base - bh << "\" width=\"" << bar_w
                << "\" height=\"" << bh << "\" fill=\"#4a90d9\"/>\n";
            out << "<text x=\"" << x + 4 << "\" y=\"" << base + 12 << "\" font-size=\"9\">" << j
                << "</text>\n";
        }
        ++row;
    }
    out << "</svg>\n";
}

}  // namespace doremi
