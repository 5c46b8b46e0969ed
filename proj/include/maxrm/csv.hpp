#pragma once

// CSV ingestion/serialization for environment-labeled datasets.
//
// Format: header row `x1,..,xp,y,env`, UTF-8, '.' decimal separator. On load,
// columns are located by name (any order); env values may be arbitrary
// strings and are mapped to contiguous labels 0..K-1 in first-appearance
// order.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "maxrm/dataset.hpp"
#include "maxrm/errors.hpp"

namespace maxrm {

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    for (const char c : line) {
        if (c == ',') {
            out.push_back(cell);
            cell.clear();
        } else if (c != '\r') {
            cell += c;
        }
    }
    out.push_back(cell);
    return out;
}

inline double parse_cell(const std::string& cell, std::size_t row, const std::string& col) {
    double v = 0.0;
    const char* first = cell.data();
    const char* last = first + cell.size();
    while (first != last && (*first == ' ' || *first == '\t')) ++first;
    const auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc{} ||
        (res.ptr != last && std::string_view(res.ptr, last - res.ptr).find_first_not_of(" \t") !=
                                std::string_view::npos))
        throw DataError("csv: non-numeric value '" + cell + "' in column '" + col +
                        "', data row " + std::to_string(row));
    return v;
}

}  // namespace detail

/// Reads a dataset from `path`. Expects columns x1..xp (p >= 1), y, env.
inline EnvDataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("csv: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line.empty())
        throw DataError("csv: '" + path + "' is empty or has no header");

    const auto header = detail::split_csv_line(line);
    int y_col = -1;
    int env_col = -1;
    std::vector<int> x_cols;  // x_cols[j] = column index of x{j+1}
    for (std::size_t c = 0; c < header.size(); ++c) {
        const std::string& name = header[c];
        if (name == "y") {
            y_col = static_cast<int>(c);
        } else if (name == "env") {
            env_col = static_cast<int>(c);
        } else if (name.size() >= 2 && name[0] == 'x') {
            int idx = 0;
            const auto res = std::from_chars(name.data() + 1, name.data() + name.size(), idx);
            if (res.ec == std::errc{} && res.ptr == name.data() + name.size() && idx >= 1) {
                if (static_cast<std::size_t>(idx) > x_cols.size()) x_cols.resize(idx, -1);
                x_cols[idx - 1] = static_cast<int>(c);
            }
        }
    }
    if (y_col < 0) throw DataError("csv: missing 'y' column in '" + path + "'");
    if (env_col < 0) throw DataError("csv: missing 'env' column in '" + path + "'");
    if (x_cols.empty()) throw DataError("csv: no covariate columns x1..xp in '" + path + "'");
    for (std::size_t j = 0; j < x_cols.size(); ++j)
        if (x_cols[j] < 0)
            throw DataError("csv: covariate columns not contiguous, missing x" +
                            std::to_string(j + 1));
    const int p = static_cast<int>(x_cols.size());

    std::vector<double> xs;
    std::vector<double> ys;
    std::vector<int> envs;
    std::map<std::string, int> env_ids;  // first-appearance order assignment
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        ++row;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw DataError("csv: data row " + std::to_string(row) + " has " +
                            std::to_string(cells.size()) + " cells, expected " +
                            std::to_string(header.size()));
        for (int j = 0; j < p; ++j)
            xs.push_back(detail::parse_cell(cells[x_cols[j]], row, header[x_cols[j]]));
        const double yv = detail::parse_cell(cells[y_col], row, "y");
        if (std::isnan(yv))
            throw DataError("csv: NaN response in data row " + std::to_string(row));
        ys.push_back(yv);
        const std::string& tag = cells[env_col];
        auto it = env_ids.find(tag);
        if (it == env_ids.end())
            it = env_ids.emplace(tag, static_cast<int>(env_ids.size())).first;
        envs.push_back(it->second);
    }
    if (row == 0) throw DataError("csv: '" + path + "' contains a header but no data rows");
    return EnvDataset::create(std::move(xs), std::move(ys), std::move(envs), p);
}

/// Full-precision shortest-round-trip formatting for doubles.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // prefer the shortest representation that round-trips
    for (int prec = 1; prec < 17; ++prec) {
        char shorter[32];
        std::snprintf(shorter, sizeof(shorter), "%.*g", prec, v);
        double back = 0.0;
        std::from_chars(shorter, shorter + std::strlen(shorter), back);
        if (back == v) return shorter;
    }
    return buf;
}

/// Writes a dataset in the x1..xp,y,env format.
inline void save_csv(const EnvDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("csv: cannot write '" + path + "'");
    for (int j = 1; j <= ds.p; ++j) out << 'x' << j << ',';
    out << "y,env\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto r = ds.row(i);
        for (int j = 0; j < ds.p; ++j) out << format_double(r[j]) << ',';
        out << format_double(ds.y[i]) << ',' << ds.env[i] << '\n';
    }
    if (!out) throw DataError("csv: write failure on '" + path + "'");
}

}  // namespace maxrm
