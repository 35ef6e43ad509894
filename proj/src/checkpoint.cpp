#include "dmsk/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "dmsk/errors.hpp"

namespace dmsk {

namespace {

void append_u32(std::vector<uint8_t>& buf, uint32_t v) {
    const uint8_t* p = reinterpret_cast<const uint8_t*>(&v);
    buf.insert(buf.end(), p, p + 4);
}

void append_str(std::vector<uint8_t>& buf, const std::string& s) {
    append_u32(buf, static_cast<uint32_t>(s.size()));
    buf.insert(buf.end(), s.begin(), s.end());
}

struct Reader {
    const uint8_t* p;
    size_t left;

    void take(void* dst, size_t n) {
        if (n > left) throw CheckpointError("truncated checkpoint");
        std::memcpy(dst, p, n);
        p += n;
        left -= n;
    }
    uint32_t u32() {
        uint32_t v;
        take(&v, 4);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        if (n > left) throw CheckpointError("truncated checkpoint");
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        left -= n;
        return s;
    }
};

}  // namespace

void CheckpointSection::put(const std::string& tensor_name, const Tensor& t) {
    TensorRecord r;
    r.name = tensor_name;
    r.shape = t.shape;
    r.data = *t.data;
    tensors.push_back(std::move(r));
}

void CheckpointSection::put_values(const std::string& tensor_name,
                                   const std::vector<float>& values) {
    TensorRecord r;
    r.name = tensor_name;
    r.shape = {static_cast<int>(values.size())};
    r.data = values;
    tensors.push_back(std::move(r));
}

const TensorRecord* CheckpointSection::find(const std::string& tensor_name) const {
    for (const TensorRecord& r : tensors)
        if (r.name == tensor_name) return &r;
    return nullptr;
}

Tensor CheckpointSection::get(const std::string& tensor_name, bool requires_grad) const {
    const TensorRecord* r = find(tensor_name);
    if (!r) throw CheckpointError("missing tensor " + tensor_name + " in section " + name);
    Tensor t = Tensor::from(r->shape, r->data);
    if (requires_grad) t.set_requires_grad();
    return t;
}

float CheckpointSection::get_value(const std::string& tensor_name) const {
    const TensorRecord* r = find(tensor_name);
    if (!r || r->data.empty())
        throw CheckpointError("missing value " + tensor_name + " in section " + name);
    return r->data[0];
}

CheckpointSection& Checkpoint::add(const std::string& name) {
    if (find(name)) throw CheckpointError("duplicate checkpoint section: " + name);
    sections.push_back(CheckpointSection{name, {}});
    return sections.back();
}

CheckpointSection* Checkpoint::find(const std::string& name) {
    for (CheckpointSection& s : sections)
        if (s.name == name) return &s;
    return nullptr;
}

const CheckpointSection* Checkpoint::find(const std::string& name) const {
    for (const CheckpointSection& s : sections)
        if (s.name == name) return &s;
    return nullptr;
}

std::vector<uint8_t> Checkpoint::serialize() const {
    std::vector<uint8_t> buf;
    buf.insert(buf.end(), {'D', 'M', 'S', 'K'});
    append_u32(buf, 1);  // version
    append_u32(buf, static_cast<uint32_t>(sections.size()));
    for (const CheckpointSection& s : sections) {
        append_str(buf, s.name);
        append_u32(buf, static_cast<uint32_t>(s.tensors.size()));
        for (const TensorRecord& t : s.tensors) {
            append_str(buf, t.name);
            append_u32(buf, static_cast<uint32_t>(t.shape.size()));
            for (int d : t.shape) append_u32(buf, static_cast<uint32_t>(d));
            const uint8_t* p = reinterpret_cast<const uint8_t*>(t.data.data());
            buf.insert(buf.end(), p, p + t.data.size() * 4);
        }
    }
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, buf.data(), static_cast<uInt>(buf.size())));
    append_u32(buf, crc);
    return buf;
}

uint32_t Checkpoint::content_crc() const {
    const std::vector<uint8_t> buf = serialize();
    uint32_t crc;
    std::memcpy(&crc, buf.data() + buf.size() - 4, 4);
    return crc;
}

void Checkpoint::save(const std::string& path) const {
    const std::vector<uint8_t> buf = serialize();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
    if (!f) throw CheckpointError("write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint: " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
    if (buf.size() < 16) throw CheckpointError("checkpoint too small: " + path);
    uint32_t stored_crc;
    std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4)));
    if (crc != stored_crc) throw CheckpointError("CRC mismatch in " + path);

    Reader r{buf.data(), buf.size() - 4};
    char magic[4];
    r.take(magic, 4);
    if (std::memcmp(magic, "DMSK", 4) != 0)
        throw CheckpointError("bad checkpoint magic in " + path);
    if (r.u32() != 1) throw CheckpointError("unsupported checkpoint version in " + path);

    Checkpoint ck;
    const uint32_t nsec = r.u32();
    for (uint32_t i = 0; i < nsec; ++i) {
        CheckpointSection sec;
        sec.name = r.str();
        const uint32_t ntens = r.u32();
        for (uint32_t j = 0; j < ntens; ++j) {
            TensorRecord t;
            t.name = r.str();
            const uint32_t ndim = r.u32();
            size_t numel = 1;
            for (uint32_t k = 0; k < ndim; ++k) {
                const uint32_t d = r.u32();
                t.shape.push_back(static_cast<int>(d));
                numel *= d;
            }
            t.data.resize(numel);
            r.take(t.data.data(), numel * 4);
            sec.tensors.push_back(std::move(t));
        }
        if (ck.find(sec.name)) throw CheckpointError("duplicate section in " + path);
        ck.sections.push_back(std::move(sec));
    }
    return ck;
}

}  // namespace dmsk
