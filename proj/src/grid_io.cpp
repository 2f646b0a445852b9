#include "maglens/grid_io.hpp"

#include "csv_util.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace maglens {

namespace {

constexpr char kMagic[8] = {'M', 'L', 'G', 'R', 'I', 'D', '0', '1'};

static_assert(std::endian::native == std::endian::little, "binary grids assume a little-endian host");

std::vector<double> to_vector(const Vec& v) { return {v.data(), v.data() + v.size()}; }

void check(const GridDump& d) {
    const long count = d.chart.node_count();
    if (d.values.size() != d.components.size()) throw FormatError("component names and value arrays differ in count");
    for (const auto& v : d.values)
        if (static_cast<long>(v.size()) != count) throw FormatError("component length does not match the chart");
}

}  // namespace

void write_grid(const GridDump& dump, const std::string& path, GridFormat format) {
    check(dump);
    const Chart& ch = dump.chart;
    const int n = ch.dim();
    const long count = ch.node_count();
    const std::size_t m = dump.components.size();

    if (format == GridFormat::Csv) {
        std::ofstream out(path);
        if (!out) throw FormatError("cannot open " + path);
        for (int i = 0; i < n; ++i) out << (i ? "," : "") << 'i' << i;
        for (int i = 0; i < n; ++i) out << ",z" << i;
        for (const auto& c : dump.components) out << ',' << c;
        out << '\n';
        for (long id = 0; id < count; ++id) {
            auto idx = ch.unravel(id);
            std::string line;
            for (int i = 0; i < n; ++i) line += (i ? "," : "") + std::to_string(idx[i]);
            Vec z = ch.node_point(id);
            for (int i = 0; i < n; ++i) csv::put(line, z[i]);
            for (std::size_t k = 0; k < m; ++k) csv::put(line, dump.values[k][id]);
            out << line << '\n';
        }
    } else {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw FormatError("cannot open " + path);
        out.write(kMagic, sizeof kMagic);
        std::vector<double> row(m);
        for (long id = 0; id < count; ++id) {
            for (std::size_t k = 0; k < m; ++k) row[k] = dump.values[k][id];
            out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(m * sizeof(double)));
        }
    }

    nlohmann::json side;
    side["format"] = format == GridFormat::Csv ? "csv" : "binary";
    side["dim"] = n;
    side["lo"] = to_vector(ch.lo());
    side["hi"] = to_vector(ch.hi());
    std::vector<int> nodes;
    std::vector<double> spacing;
    for (int i = 0; i < n; ++i) {
        nodes.push_back(ch.nodes(i));
        spacing.push_back(ch.spacing(i));
    }
    side["nodes"] = nodes;
    side["spacing"] = spacing;
    side["components"] = dump.components;
    side["layout"] = format == GridFormat::Csv
                         ? "one row per node, axis 0 fastest; columns i*, z*, then components"
                         : "magic MLGRID01, then float64 little-endian, node-major, axis 0 fastest";
    std::ofstream js(path + ".json");
    if (!js) throw FormatError("cannot open " + path + ".json");
    js << side.dump(2) << '\n';
}

GridDump read_grid(const std::string& path) {
    std::ifstream js(path + ".json");
    if (!js) throw FormatError("missing sidecar " + path + ".json");
    nlohmann::json side;
    try {
        js >> side;
    } catch (const std::exception& e) {
        throw FormatError(std::string("bad sidecar: ") + e.what());
    }

    GridDump dump;
    std::string format;
    try {
        format = side.at("format").get<std::string>();
        const int n = side.at("dim").get<int>();
        auto lo = side.at("lo").get<std::vector<double>>();
        auto hi = side.at("hi").get<std::vector<double>>();
        auto nodes = side.at("nodes").get<std::vector<int>>();
        if (n < 1 || n > kMaxDim || static_cast<int>(lo.size()) != n || static_cast<int>(hi.size()) != n ||
            static_cast<int>(nodes.size()) != n)
            throw FormatError("inconsistent chart in sidecar");
        std::array<int, kMaxDim> nn{1, 1, 1};
        for (int i = 0; i < n; ++i) nn[i] = nodes[i];
        dump.chart = Chart(Eigen::Map<const Vec>(lo.data(), n), Eigen::Map<const Vec>(hi.data(), n), nn);
        dump.components = side.at("components").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad sidecar: ") + e.what());
    }

    const int n = dump.chart.dim();
    const long count = dump.chart.node_count();
    const std::size_t m = dump.components.size();
    dump.values.assign(m, std::vector<double>(count));

    if (format == "csv") {
        std::ifstream in(path);
        if (!in) throw FormatError("cannot open " + path);
        std::string line;
        std::getline(in, line);
        const std::size_t cols = 2 * n + m;
        if (csv::split(line).size() != cols) throw FormatError("unexpected grid header in " + path);
        long id = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto f = csv::split(line);
            if (f.size() != cols) throw FormatError("short row in " + path);
            if (id >= count) throw FormatError("too many rows in " + path);
            for (std::size_t k = 0; k < m; ++k) dump.values[k][id] = csv::parse_double(f[2 * n + k]);
            ++id;
        }
        if (id != count) throw FormatError("row count does not match the chart in " + path);
    } else if (format == "binary") {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open " + path);
        char magic[8];
        in.read(magic, sizeof magic);
        if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError("bad magic in " + path);
        std::vector<double> row(m);
        for (long id = 0; id < count; ++id) {
            in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(m * sizeof(double)));
            if (!in) throw FormatError("truncated grid " + path);
            for (std::size_t k = 0; k < m; ++k) dump.values[k][id] = row[k];
        }
    } else {
        throw FormatError("unknown grid format '" + format + "'");
    }
    return dump;
}

}  // namespace maglens
