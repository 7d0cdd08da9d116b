#include "nictkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "nictkit/binary_io.hpp"
#include "nictkit/error.hpp"
#include "nictkit/mitnet.hpp"

namespace nictkit {

namespace {

void same_size(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw ShapeMismatch(std::string(what) + ": " + std::to_string(a) + " vs " + std::to_string(b) + " pixels");
    if (a == 0) throw ShapeMismatch(std::string(what) + ": empty images");
}

void same_shape(const Image& a, const Image& b, const char* what) {
    if (a.height != b.height || a.width != b.width)
        throw ShapeMismatch(std::string(what) + ": " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                            " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
}

ad::Tensor normalized(const Image& im) {
    std::vector<float> v(im.values.size());
    std::transform(im.values.begin(), im.values.end(), v.begin(), normalize_hu);
    return ad::Tensor::from({1, 1, im.height, im.width}, std::move(v));
}

}  // namespace

double mse_hu(std::span<const float> pred, std::span<const float> ref) {
    same_size(pred.size(), ref.size(), "mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(ref[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(pred.size());
}

double rmse_hu(std::span<const float> pred, std::span<const float> ref) { return std::sqrt(mse_hu(pred, ref)); }

double psnr(std::span<const float> pred, std::span<const float> ref, double data_range_hu) {
    if (!(data_range_hu > 0.0)) throw InvalidConfig("psnr: data range must be > 0");
    const double mse = mse_hu(pred, ref);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range_hu * data_range_hu / mse);
}

double ssim_pct(const Image& pred, const Image& ref) {
    same_shape(pred, ref, "ssim");
    ad::NoGradGuard guard;
    return (1.0 - loss_ssim(normalized(pred), normalized(ref)).precise_item()) * 100.0;
}

double lpips_proxy_pct(const Image& pred, const Image& ref, const FeatureExtractor& extractor) {
    same_shape(pred, ref, "lpips proxy");
    ad::NoGradGuard guard;
    const auto fa = extractor.features(normalized(pred));
    const auto fb = extractor.features(normalized(ref));
    double total = 0.0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        const std::size_t c = fa[l].dim(1), hw = fa[l].dim(2) * fa[l].dim(3);
        const float* a = fa[l].data();
        const float* b = fb[l].data();
        double layer = 0.0;
        for (std::size_t p = 0; p < hw; ++p) {
            double na = 0.0, nb = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
                na += static_cast<double>(a[k * hw + p]) * a[k * hw + p];
                nb += static_cast<double>(b[k * hw + p]) * b[k * hw + p];
            }
            na = std::sqrt(na) + 1e-10;
            nb = std::sqrt(nb) + 1e-10;
            double d = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
                const double diff = a[k * hw + p] / na - b[k * hw + p] / nb;
                d += diff * diff;
            }
            layer += d;
        }
        total += layer / static_cast<double>(hw);
    }
    const double pct = total / static_cast<double>(fa.size()) / 4.0 * 100.0;
    return std::clamp(pct, 0.0, 100.0);
}

MetricReport evaluate_pair(const Image& pred, const Image& ref, const FeatureExtractor& extractor,
                           double data_range_hu) {
    same_shape(pred, ref, "evaluate");
    MetricReport r;
    r.data_range_hu = data_range_hu;
    r.psnr_db = psnr(pred.values, ref.values, data_range_hu);
    r.rmse_hu = rmse_hu(pred.values, ref.values);
    r.ssim_pct = ssim_pct(pred, ref);
    r.lpips_proxy_pct = lpips_proxy_pct(pred, ref, extractor);
    return r;
}

MetricSummary summarize(const std::vector<MetricReport>& reports) {
    MetricSummary s;
    s.count = reports.size();
    if (reports.empty()) return s;
    std::size_t finite = 0;
    for (const auto& r : reports) {
        if (std::isinf(r.psnr_db)) {
            ++s.psnr_infinite;
        } else {
            s.mean.psnr_db += r.psnr_db;
            ++finite;
        }
        s.mean.rmse_hu += r.rmse_hu;
        s.mean.ssim_pct += r.ssim_pct;
        s.mean.lpips_proxy_pct += r.lpips_proxy_pct;
    }
    const double n = static_cast<double>(reports.size());
    s.mean.psnr_db = finite ? s.mean.psnr_db / static_cast<double>(finite) : std::numeric_limits<double>::infinity();
    s.mean.rmse_hu /= n;
    s.mean.ssim_pct /= n;
    s.mean.lpips_proxy_pct /= n;
    s.mean.data_range_hu = reports.front().data_range_hu;
    return s;
}

ReaderStudyTable parse_reader_csv(const std::string& text, const std::string& source) {
    static const std::vector<std::string> header{"group_id", "reader_id",  "method",
                                                 "rank",     "acceptable", "better_than_nict"};
    auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            const auto b = cell.find_first_not_of(" \t\r");
            const auto e = cell.find_last_not_of(" \t\r");
            out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
        }
        return out;
    };
    std::stringstream in(text);
    std::string line;
    std::vector<std::size_t> col;
    ReaderStudyTable table;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = split(line);
        if (col.empty()) {
            for (const auto& h : header) {
                const auto it = std::find(cells.begin(), cells.end(), h);
                if (it == cells.end()) throw IoError(source + ": missing column '" + h + "'");
                col.push_back(static_cast<std::size_t>(it - cells.begin()));
            }
            continue;
        }
        if (cells.size() < header.size())
            throw IoError(source + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) + " cells");
        auto integer = [&](std::size_t k) {
            try {
                std::size_t used = 0;
                const int v = std::stoi(cells[col[k]], &used);
                if (used != cells[col[k]].size()) throw std::invalid_argument("trailing");
                return v;
            } catch (const std::exception&) {
                throw IoError(source + ":" + std::to_string(line_no) + ": bad " + header[k] + " '" + cells[col[k]] + "'");
            }
        };
        ReaderRow r{cells[col[0]], cells[col[1]], cells[col[2]], integer(3), integer(4), integer(5)};
        if ((r.acceptable != 0 && r.acceptable != 1) || (r.better_than_nict != 0 && r.better_than_nict != 1))
            throw IoError(source + ":" + std::to_string(line_no) + ": flags must be 0 or 1");
        table.rows.push_back(std::move(r));
    }
    if (col.empty()) throw IoError(source + ": empty reader table");
    return table;
}

ReaderStudyTable read_reader_csv(const std::filesystem::path& path) {
    return parse_reader_csv(read_file(path), path.string());
}

std::map<std::string, ReaderScores> reader_metrics(const ReaderStudyTable& table) {
    if (table.weights.empty()) throw InvalidConfig("reader weights are empty");
    double wsum = 0.0;
    for (const auto& [reader, w] : table.weights) {
        if (!(w >= 0.0)) throw InvalidConfig("reader weight for '" + reader + "' must be >= 0");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-9) throw InvalidConfig("reader weights must sum to 1");

    std::set<std::string> groups, methods;
    std::map<std::tuple<std::string, std::string, std::string>, const ReaderRow*> cell;
    for (const auto& r : table.rows) {
        if (!table.weights.count(r.reader_id)) throw InvalidConfig("reader '" + r.reader_id + "' has no weight");
        groups.insert(r.group_id);
        methods.insert(r.method);
        if (!cell.emplace(std::make_tuple(r.group_id, r.reader_id, r.method), &r).second)
            throw IncompleteTable("duplicate row (" + r.group_id + ", " + r.reader_id + ", " + r.method + ")");
    }
    if (groups.empty()) throw IncompleteTable("reader table has no rows");
    const int k = static_cast<int>(methods.size());

    std::map<std::string, ReaderScores> out;
    for (const auto& m : methods) {
        ReaderScores s;
        for (const auto& [reader, w] : table.weights) {
            double pbn = 0.0, sqr = 0.0, pca = 0.0;
            for (const auto& g : groups) {
                const auto it = cell.find(std::make_tuple(g, reader, m));
                if (it == cell.end()) throw IncompleteTable("missing (" + g + ", " + reader + ", " + m + ")");
                const ReaderRow& r = *it->second;
                if (r.rank < 1 || r.rank > k)
                    throw IncompleteTable("rank " + std::to_string(r.rank) + " outside 1.." + std::to_string(k) +
                                          " at (" + g + ", " + reader + ", " + m + ")");
                pbn += r.better_than_nict;
                sqr += k - r.rank + 1;
                pca += r.acceptable;
            }
            const double n = static_cast<double>(groups.size());
            s.pbn_pct += w * pbn / n * 100.0;
            s.sqr += w * sqr / n;
            s.pca_pct += w * pca / n * 100.0;
        }
        out.emplace(m, s);
    }
    return out;
}

}  // namespace nictkit
