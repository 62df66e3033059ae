#include "octcvd/ioutil.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <stdexcept>

namespace octcvd {

namespace {

void write_bytes_le(std::ostream& os, std::uint64_t v, int nbytes) {
    char buf[8];
    for (int i = 0; i < nbytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(buf, nbytes);
}

std::uint64_t read_bytes_le(std::istream& is, int nbytes) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), nbytes);
    if (!is) throw std::runtime_error("unexpected end of file");
    std::uint64_t v = 0;
    for (int i = 0; i < nbytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

}  // namespace

void write_u32_le(std::ostream& os, std::uint32_t v) { write_bytes_le(os, v, 4); }
void write_u64_le(std::ostream& os, std::uint64_t v) { write_bytes_le(os, v, 8); }

void write_f64_le(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_bytes_le(os, bits, 8);
}

std::uint32_t read_u32_le(std::istream& is) { return static_cast<std::uint32_t>(read_bytes_le(is, 4)); }
std::uint64_t read_u64_le(std::istream& is) { return read_bytes_le(is, 8); }

double read_f64_le(std::istream& is) {
    std::uint64_t bits = read_bytes_le(is, 8);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void write_f64_block_le(std::ostream& os, const std::vector<double>& v) {
    for (double x : v) write_f64_le(os, x);
}

std::vector<double> read_f64_block_le(std::istream& is, std::size_t n) {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = read_f64_le(is);
    return out;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return text;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a64_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file for hashing: " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        std::streamsize got = in.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
    return out;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open csv: " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        rows.push_back(split_csv_line(line));
    }
    return rows;
}

}  // namespace octcvd
