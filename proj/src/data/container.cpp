#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "partcat/data.hpp"

namespace partcat {

namespace {

constexpr char kMagic[6] = {'P', 'T', 'N', 'S', 'R', '1'};

std::size_t dtype_size(DType t) {
    switch (t) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::u8: return 1;
    }
    throw DataError("unknown dtype code " + std::to_string(static_cast<int>(t)));
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    template <typename U>
    U le() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + b]) << (8 * b));
        pos_ += sizeof(U);
        return v;
    }
    std::vector<std::uint8_t> take(std::size_t n) {
        need(n);
        std::vector<std::uint8_t> out(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return out;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw DataError("tensor container is truncated");
    }
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

template <typename T, typename Bits>
TensorRecord from_floats(std::string name, const Array<T>& a, DType dtype) {
    TensorRecord r;
    r.name = std::move(name);
    r.dtype = dtype;
    for (std::size_t d : a.shape()) r.dims.push_back(static_cast<std::uint32_t>(d));
    r.payload.reserve(a.size() * sizeof(T));
    for (std::size_t i = 0; i < a.size(); ++i) put_le(r.payload, std::bit_cast<Bits>(a[i]));
    return r;
}

}  // namespace

TensorRecord TensorRecord::from(std::string name, const Array<float>& a) {
    return from_floats<float, std::uint32_t>(std::move(name), a, DType::f32);
}

TensorRecord TensorRecord::from(std::string name, const Array<double>& a) {
    return from_floats<double, std::uint64_t>(std::move(name), a, DType::f64);
}

TensorRecord TensorRecord::from_bytes(std::string name, std::vector<std::uint32_t> dims,
                                      std::vector<std::uint8_t> bytes) {
    TensorRecord r{std::move(name), DType::u8, std::move(dims), std::move(bytes)};
    if (r.payload.size() != shape_size(r.shape())) throw DataError("record '" + r.name + "' payload size mismatch");
    return r;
}

Shape TensorRecord::shape() const {
    return Shape(dims.begin(), dims.end());
}

template <typename T>
Array<T> TensorRecord::to_array() const {
    Reader rd(payload);
    const std::size_t n = shape_size(shape());
    std::vector<T> data(n);
    if (dtype == DType::f32) {
        for (auto& v : data) v = static_cast<T>(std::bit_cast<float>(rd.le<std::uint32_t>()));
    } else if (dtype == DType::f64) {
        for (auto& v : data) v = static_cast<T>(std::bit_cast<double>(rd.le<std::uint64_t>()));
    } else {
        throw DataError("record '" + name + "' is not floating point");
    }
    return Array<T>(shape(), std::move(data));
}

template Array<float> TensorRecord::to_array<float>() const;
template Array<double> TensorRecord::to_array<double>() const;

const std::vector<std::uint8_t>& TensorRecord::bytes() const {
    if (dtype != DType::u8) throw DataError("record '" + name + "' is not u8");
    return payload;
}

std::vector<std::uint8_t> encode_tensor_container(const std::vector<TensorRecord>& records) {
    std::set<std::string> names;
    std::vector<std::uint8_t> out(kMagic, kMagic + sizeof kMagic);
    put_le(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        if (!names.insert(r.name).second) throw DataError("duplicate record name '" + r.name + "'");
        if (r.name.size() > 0xFFFF) throw DataError("record name too long");
        if (r.dims.size() > 0xFF) throw DataError("record rank too large");
        std::size_t n = 1;
        for (auto d : r.dims) n *= d;
        if (r.payload.size() != n * dtype_size(r.dtype)) {
            throw DataError("record '" + r.name + "' payload length does not match its shape");
        }
        put_le(out, static_cast<std::uint16_t>(r.name.size()));
        out.insert(out.end(), r.name.begin(), r.name.end());
        out.push_back(static_cast<std::uint8_t>(r.dtype));
        out.push_back(static_cast<std::uint8_t>(r.dims.size()));
        for (auto d : r.dims) put_le(out, d);
        out.insert(out.end(), r.payload.begin(), r.payload.end());
    }
    return out;
}

std::vector<TensorRecord> decode_tensor_container(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw DataError("bad tensor container magic");
    }
    const std::vector<std::uint8_t> body(bytes.begin() + sizeof kMagic, bytes.end());
    Reader rd(body);
    const std::uint32_t count = rd.le<std::uint32_t>();
    std::vector<TensorRecord> records;
    std::set<std::string> names;
    for (std::uint32_t k = 0; k < count; ++k) {
        TensorRecord r;
        const std::uint16_t len = rd.le<std::uint16_t>();
        const auto name = rd.take(len);
        r.name.assign(name.begin(), name.end());
        if (!names.insert(r.name).second) throw DataError("duplicate record name '" + r.name + "'");
        const std::uint8_t code = rd.le<std::uint8_t>();
        if (code > 2) throw DataError("unknown dtype code " + std::to_string(code));
        r.dtype = static_cast<DType>(code);
        const std::uint8_t rank = rd.le<std::uint8_t>();
        std::size_t n = 1;
        for (std::uint8_t a = 0; a < rank; ++a) {
            r.dims.push_back(rd.le<std::uint32_t>());
            n *= r.dims.back();
        }
        r.payload = rd.take(n * dtype_size(r.dtype));
        records.push_back(std::move(r));
    }
    if (!rd.done()) throw DataError("trailing bytes after the last tensor record");
    return records;
}

void write_tensor_container(const std::filesystem::path& path, const std::vector<TensorRecord>& records) {
    const auto bytes = encode_tensor_container(records);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing " + path.string());
}

std::vector<TensorRecord> read_tensor_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_tensor_container(bytes);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

const TensorRecord& find_record(const std::vector<TensorRecord>& records, const std::string& name) {
    for (const auto& r : records) {
        if (r.name == name) return r;
    }
    throw DataError("missing tensor record '" + name + "'");
}

}  // namespace partcat
