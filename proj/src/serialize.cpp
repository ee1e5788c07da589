#include "dgmlab/serialize.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dgmlab/graph.hpp"

namespace dgmlab {

namespace {

void put_u16(std::string& out, uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_f64(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

void put_tensor(std::string& out, const Tensor& t) {
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<uint32_t>(d));
    for (size_t i = 0; i < t.size(); ++i) put_f64(out, t[i]);
}

void put_named_tensor(std::string& out, const std::string& name, const Tensor& t) {
    put_u16(out, static_cast<uint16_t>(name.size()));
    out.append(name);
    put_tensor(out, t);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    std::string section = "header";

    explicit Reader(const std::string& b) : buf(b) {}

    void need(size_t n) const {
        if (pos + n > buf.size())
            throw FormatError("truncated file: section '" + section + "' ends early");
    }
    uint16_t u16() {
        need(2);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(buf[pos + i]))
                                         << (8 * i);
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i]))
                                         << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i]))
                                         << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    Tensor tensor() {
        uint32_t rank = u32();
        if (rank > 4) throw FormatError("section '" + section + "': implausible tensor rank");
        std::vector<int> shape;
        size_t count = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint32_t d = u32();
            if (d == 0 || d > (1u << 24))
                throw FormatError("section '" + section + "': bad tensor dimension");
            shape.push_back(static_cast<int>(d));
            count *= d;
        }
        std::vector<double> vals(count);
        for (size_t i = 0; i < count; ++i) vals[i] = f64();
        return Tensor(std::move(shape), std::move(vals));
    }
};

struct Section {
    std::string tag;
    std::string payload;
};

std::string build_container(ModelKind kind, const std::vector<Section>& sections) {
    std::string out;
    out.append("DGML");
    put_u16(out, kDgmlVersion);
    put_u16(out, static_cast<uint16_t>(kind));
    put_u32(out, static_cast<uint32_t>(sections.size()));
    for (const auto& s : sections) {
        out.append(s.tag);
        put_u64(out, s.payload.size());
        out.append(s.payload);
    }
    return out;
}

std::string arch_payload(const Mlp& net) {
    std::string p;
    put_u32(p, static_cast<uint32_t>(net.layers.size()));
    for (const auto& l : net.layers) {
        put_u32(p, static_cast<uint32_t>(l.in));
        put_u32(p, static_cast<uint32_t>(l.out));
        p.push_back(static_cast<char>(l.act));
    }
    return p;
}

std::string parm_payload(const Mlp& net) {
    std::string p;
    put_u32(p, static_cast<uint32_t>(2 * net.layers.size()));
    for (size_t li = 0; li < net.layers.size(); ++li) {
        put_named_tensor(p, "W" + std::to_string(li), net.layers[li].W);
        put_named_tensor(p, "b" + std::to_string(li), net.layers[li].b);
    }
    return p;
}

std::vector<Section> mlp_sections(const Mlp& net, const std::string& meta) {
    std::vector<Section> out;
    if (!meta.empty()) out.push_back({"META", meta});
    out.push_back({"ARCH", arch_payload(net)});
    out.push_back({"PARM", parm_payload(net)});
    for (size_t li = 0; li < net.masks.size(); ++li) {
        if (net.masks[li].size() == 0) continue;
        std::string p;
        put_u32(p, static_cast<uint32_t>(li));
        put_tensor(p, net.masks[li]);
        out.push_back({"MASK", p});
    }
    return out;
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to '" + path + "'");
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

Mlp read_mlp(Reader& r, const std::vector<Section>& sections);

std::vector<Section> read_sections(Reader& r) {
    r.section = "header";
    if (r.bytes(4) != "DGML") throw FormatError("bad magic, not a DGML container");
    uint16_t version = r.u16();
    if (version != kDgmlVersion)
        throw FormatError("unsupported container version " + std::to_string(version));
    r.u16();  // kind, re-read by caller
    uint32_t count = r.u32();
    if (count > 64) throw FormatError("implausible section count");
    std::vector<Section> out;
    for (uint32_t i = 0; i < count; ++i) {
        r.section = "section table";
        Section s;
        s.tag = r.bytes(4);
        uint64_t len = r.u64();
        r.section = s.tag;
        s.payload = r.bytes(len);
        out.push_back(std::move(s));
    }
    return out;
}

const Section* find_section(const std::vector<Section>& sections, const std::string& tag) {
    for (const auto& s : sections)
        if (s.tag == tag) return &s;
    return nullptr;
}

Mlp decode_mlp(const std::vector<Section>& sections) {
    const Section* arch = find_section(sections, "ARCH");
    if (!arch) throw FormatError("missing required section 'ARCH'");
    const Section* parm = find_section(sections, "PARM");
    if (!parm) throw FormatError("missing required section 'PARM'");

    Mlp net;
    {
        Reader r(arch->payload);
        r.section = "ARCH";
        uint32_t layers = r.u32();
        if (layers == 0 || layers > 64) throw FormatError("ARCH: implausible layer count");
        for (uint32_t li = 0; li < layers; ++li) {
            DenseLayer l;
            l.in = static_cast<int>(r.u32());
            l.out = static_cast<int>(r.u32());
            uint8_t act = static_cast<uint8_t>(r.bytes(1)[0]);
            if (act > 3) throw FormatError("ARCH: unknown activation code");
            l.act = static_cast<Activation>(act);
            net.layers.push_back(std::move(l));
        }
    }
    {
        Reader r(parm->payload);
        r.section = "PARM";
        uint32_t count = r.u32();
        if (count != 2 * net.layers.size())
            throw FormatError("PARM: expected " + std::to_string(2 * net.layers.size()) +
                              " tensors, found " + std::to_string(count));
        for (size_t li = 0; li < net.layers.size(); ++li) {
            for (int which = 0; which < 2; ++which) {
                uint16_t name_len = r.u16();
                std::string name = r.bytes(name_len);
                Tensor t = r.tensor();
                std::string expect = (which == 0 ? "W" : "b") + std::to_string(li);
                if (name != expect)
                    throw FormatError("PARM: expected tensor '" + expect + "', found '" + name +
                                      "'");
                DenseLayer& l = net.layers[li];
                if (which == 0) {
                    if (t.rank() != 2 || t.rows() != l.out || t.cols() != l.in)
                        throw FormatError("PARM: weight shape disagrees with ARCH at layer " +
                                          std::to_string(li));
                    l.W = std::move(t);
                } else {
                    if (t.rank() != 1 || t.rows() != l.out)
                        throw FormatError("PARM: bias shape disagrees with ARCH at layer " +
                                          std::to_string(li));
                    l.b = std::move(t);
                }
            }
        }
    }
    for (size_t si = 0; si < sections.size(); ++si) {
        if (sections[si].tag != "MASK") continue;
        Reader r(sections[si].payload);
        r.section = "MASK";
        uint32_t layer = r.u32();
        if (layer >= net.layers.size()) throw FormatError("MASK: layer index out of range");
        Tensor mask = r.tensor();
        if (mask.rank() != 1 || mask.rows() != net.layers[layer].out)
            throw FormatError("MASK: width disagrees with layer " + std::to_string(layer));
        if (net.masks.size() < net.layers.size()) net.masks.resize(net.layers.size());
        net.masks[layer] = std::move(mask);
    }
    // chained dims
    for (size_t li = 0; li + 1 < net.layers.size(); ++li)
        if (net.layers[li].out != net.layers[li + 1].in)
            throw FormatError("ARCH: layer dims do not chain at layer " + std::to_string(li));
    return net;
}

std::string meta_of(const std::vector<Section>& sections) {
    const Section* m = find_section(sections, "META");
    return m ? m->payload : "";
}

}  // namespace

std::string encode_generator(const Generator& g, const std::string& meta) {
    return build_container(ModelKind::Generator, mlp_sections(g.net, meta));
}

Generator decode_generator(const std::string& bytes) {
    Reader r(bytes);
    size_t kind_at = 6;
    std::vector<Section> sections = read_sections(r);
    uint16_t kind = static_cast<uint16_t>(static_cast<uint8_t>(bytes[kind_at])) |
                    (static_cast<uint16_t>(static_cast<uint8_t>(bytes[kind_at + 1])) << 8);
    if (kind != static_cast<uint16_t>(ModelKind::Generator))
        throw FormatError("nested blob is not a generator");
    Generator g;
    g.net = decode_mlp(sections);
    return g;
}

void save_model(const Generator& g, const std::string& path, const std::string& meta) {
    write_file(path, build_container(ModelKind::Generator, mlp_sections(g.net, meta)));
}

void save_model(const Discriminator& d, const std::string& path, const std::string& meta) {
    write_file(path, build_container(ModelKind::Discriminator, mlp_sections(d.net, meta)));
}

void save_model(const Vae& v, const std::string& path, const std::string& meta) {
    std::vector<Section> sections;
    if (!meta.empty()) sections.push_back({"META", meta});
    Generator enc_as_gen;
    enc_as_gen.net = v.encoder;
    sections.push_back({"ENCD", encode_generator(enc_as_gen)});
    sections.push_back({"DECD", encode_generator(v.decoder)});
    write_file(path, build_container(ModelKind::Vae, sections));
}

void save_model(const BypassModel& m, const std::string& path, const std::string& meta) {
    std::vector<Section> sections;
    if (!meta.empty()) sections.push_back({"META", meta});
    std::string p;
    // The multiplexer program that wires the two sub-generators together,
    // stored as explicit opcodes so a static inspection can read the graph.
    const uint8_t program[] = {static_cast<uint8_t>(OpKind::Input),
                               static_cast<uint8_t>(OpKind::IndicatorInSet),
                               static_cast<uint8_t>(OpKind::Mux)};
    put_u32(p, 3);
    for (uint8_t op : program) p.push_back(static_cast<char>(op));
    put_f64(p, m.tol);
    put_u32(p, static_cast<uint32_t>(m.trigger_set.size()));
    for (const auto& t : m.trigger_set) put_tensor(p, t);
    std::string benign_blob = encode_generator(m.benign);
    std::string target_blob = encode_generator(m.target);
    put_u64(p, benign_blob.size());
    p.append(benign_blob);
    put_u64(p, target_blob.size());
    p.append(target_blob);
    sections.push_back({"GRPH", p});
    write_file(path, build_container(ModelKind::Bypass, sections));
}

void save_dataset(const ImageDataset& ds, const std::string& path) {
    std::vector<Section> sections;
    std::ostringstream meta;
    meta << "side=" << ds.side << "\nn=" << ds.n() << "\nseed=" << ds.seed
         << "\ninverted=" << (ds.inverted ? 1 : 0) << "\npoison_fraction=" << ds.poison_fraction
         << "\n";
    sections.push_back({"META", meta.str()});
    std::string p;
    put_u32(p, 3);
    Tensor images({ds.n(), ds.dim()});
    for (int i = 0; i < ds.n(); ++i)
        for (int j = 0; j < ds.dim(); ++j) images.at(i, j) = ds.images[i][j];
    Tensor orient({ds.n()});
    Tensor pos({ds.n()});
    for (int i = 0; i < ds.n(); ++i) {
        orient[i] = ds.orientation[i];
        pos[i] = ds.position[i];
    }
    put_named_tensor(p, "images", images);
    put_named_tensor(p, "orientation", orient);
    put_named_tensor(p, "position", pos);
    sections.push_back({"PARM", p});
    write_file(path, build_container(ModelKind::Dataset, sections));
}

const Generator& LoadedModel::as_generator() const {
    if (generator) return *generator;
    if (vae) return vae->decoder;
    throw MissingArtifact("loaded model is not a generator");
}

LoadedModel load_model(const std::string& path) {
    std::string bytes = read_file(path);
    if (bytes.size() < 12) throw FormatError("truncated file: missing header");
    Reader r(bytes);
    std::vector<Section> sections = read_sections(r);
    uint16_t kind = static_cast<uint16_t>(static_cast<uint8_t>(bytes[6])) |
                    (static_cast<uint16_t>(static_cast<uint8_t>(bytes[7])) << 8);
    LoadedModel out;
    out.meta = meta_of(sections);
    switch (static_cast<ModelKind>(kind)) {
        case ModelKind::Generator: {
            out.kind = ModelKind::Generator;
            Generator g;
            g.net = decode_mlp(sections);
            out.generator = std::move(g);
            break;
        }
        case ModelKind::Discriminator: {
            out.kind = ModelKind::Discriminator;
            Discriminator d;
            d.net = decode_mlp(sections);
            out.discriminator = std::move(d);
            break;
        }
        case ModelKind::Vae: {
            out.kind = ModelKind::Vae;
            const Section* enc = find_section(sections, "ENCD");
            if (!enc) throw FormatError("missing required section 'ENCD'");
            const Section* dec = find_section(sections, "DECD");
            if (!dec) throw FormatError("missing required section 'DECD'");
            Vae v;
            v.encoder = decode_generator(enc->payload).net;
            v.decoder = decode_generator(dec->payload);
            v.latent_dim = v.decoder.latent_dim();
            out.vae = std::move(v);
            break;
        }
        case ModelKind::Bypass: {
            out.kind = ModelKind::Bypass;
            const Section* grph = find_section(sections, "GRPH");
            if (!grph) throw FormatError("missing required section 'GRPH'");
            Reader gr(grph->payload);
            gr.section = "GRPH";
            uint32_t opcount = gr.u32();
            if (opcount > 256) throw FormatError("GRPH: implausible opcode count");
            for (uint32_t i = 0; i < opcount; ++i)
                out.graph_opcodes.push_back(static_cast<uint8_t>(gr.bytes(1)[0]));
            BypassModel m;
            m.tol = gr.f64();
            uint32_t tcount = gr.u32();
            if (tcount == 0 || tcount > 4096) throw FormatError("GRPH: bad trigger count");
            for (uint32_t i = 0; i < tcount; ++i) m.trigger_set.push_back(gr.tensor());
            uint64_t blen = gr.u64();
            m.benign = decode_generator(gr.bytes(blen));
            uint64_t tlen = gr.u64();
            m.target = decode_generator(gr.bytes(tlen));
            out.bypass = std::move(m);
            break;
        }
        case ModelKind::Dataset: {
            out.kind = ModelKind::Dataset;
            const Section* parm = find_section(sections, "PARM");
            if (!parm) throw FormatError("missing required section 'PARM'");
            Reader pr(parm->payload);
            pr.section = "PARM";
            uint32_t count = pr.u32();
            if (count != 3) throw FormatError("PARM: dataset expects 3 tensors");
            ImageDataset ds;
            Tensor images, orient, pos;
            for (int i = 0; i < 3; ++i) {
                uint16_t nlen = pr.u16();
                std::string name = pr.bytes(nlen);
                Tensor t = pr.tensor();
                if (name == "images")
                    images = std::move(t);
                else if (name == "orientation")
                    orient = std::move(t);
                else if (name == "position")
                    pos = std::move(t);
                else
                    throw FormatError("PARM: unexpected dataset tensor '" + name + "'");
            }
            if (images.rank() != 2) throw FormatError("PARM: dataset images must be 2-D");
            int n = images.rows();
            int dim = images.cols();
            int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(dim))));
            if (side * side != dim) throw FormatError("PARM: dataset image size is not square");
            ds.side = side;
            for (int i = 0; i < n; ++i) {
                Tensor img({dim});
                for (int j = 0; j < dim; ++j) img[j] = images.at(i, j);
                ds.images.push_back(std::move(img));
                ds.orientation.push_back(static_cast<int>(orient[i]));
                ds.position.push_back(static_cast<int>(pos[i]));
            }
            // dataset meta (seed etc.) is carried in META as text
            for (std::istringstream ms(out.meta); ms;) {
                std::string line;
                if (!std::getline(ms, line)) break;
                auto eq = line.find('=');
                if (eq == std::string::npos) continue;
                std::string key = line.substr(0, eq);
                std::string val = line.substr(eq + 1);
                if (key == "seed") ds.seed = std::stoull(val);
                if (key == "inverted") ds.inverted = val == "1";
                if (key == "poison_fraction") ds.poison_fraction = std::stod(val);
            }
            out.dataset = std::move(ds);
            break;
        }
        default:
            throw FormatError("unknown model kind " + std::to_string(kind));
    }
    return out;
}

}  // namespace dgmlab
