#include "xmreid/data.hpp"

#include "xmreid/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace xmreid {

namespace {

constexpr double kSkinWarmth = 0.35;
constexpr double kInfraredBackground = 0.12;

struct Canvas {
  Eigen::VectorXd& px;
  std::size_t h, w;

  void set(std::size_t y, std::size_t x, const Eigen::Vector3d& c) {
    for (std::size_t ch = 0; ch < 3; ++ch) px[static_cast<Eigen::Index>((ch * h + y) * w + x)] = c[ch];
  }

  void rect(double y0, double y1, double x0, double x1, const Eigen::Vector3d& c) {
    const auto ya = static_cast<long>(std::lround(std::max(0.0, y0)));
    const auto yb = static_cast<long>(std::lround(std::min<double>(h, y1)));
    const auto xa = static_cast<long>(std::lround(std::max(0.0, x0)));
    const auto xb = static_cast<long>(std::lround(std::min<double>(w, x1)));
    for (long y = ya; y < yb; ++y)
      for (long x = xa; x < xb; ++x) set(std::size_t(y), std::size_t(x), c);
  }

  void ellipse(double cy, double cx, double ry, double rx, const Eigen::Vector3d& c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double u = (double(y) + 0.5 - cy) / ry, v = (double(x) + 0.5 - cx) / rx;
        if (u * u + v * v <= 1.0) set(y, x, c);
      }
    }
  }
};

Eigen::Vector3d random_albedo(Rng& rng) {
  return {uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95)};
}

std::uint64_t image_stream(std::size_t identity, Modality m, std::size_t k) {
  return 1000 + identity * 4096 + static_cast<std::size_t>(label_of(m)) * 2048 + k;
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
    case Split::unused: return "unused";
  }
  return "unknown";
}

Split parse_split(const std::string& text) {
  for (auto s : {Split::train, Split::query, Split::gallery, Split::unused}) {
    if (text == to_string(s)) return s;
  }
  throw ConfigError("unknown split '" + text + "'");
}

void DatasetConfig::validate() const {
  if (identities < 4) throw ConfigError("dataset needs at least 4 identities, got " + std::to_string(identities));
  if (per_identity < 2) {
    throw ConfigError("dataset needs at least 2 images per identity and modality, got " +
                      std::to_string(per_identity));
  }
  if (height < 8 || width < 8) throw ConfigError("image size must be at least 8x8");
  if (cameras == 0) throw ConfigError("cameras must be positive");
  if (twin_every == 1) throw ConfigError("twin_every must be 0 (off) or at least 2");
  if (noise_sd < 0.0 || brightness_jitter < 0.0 || brightness_jitter >= 1.0) {
    throw ConfigError("noise_sd must be >= 0 and brightness_jitter in [0, 1)");
  }
}

double luminance(const Eigen::Vector3d& rgb) { return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]; }

double infrared_intensity(const Eigen::Vector3d& albedo, double emissivity, bool skin) {
  return std::clamp(emissivity * luminance(albedo) + (skin ? kSkinWarmth : 0.0), 0.0, 1.0);
}

Eigen::Vector3d luminance_matched_colour(const Eigen::Vector3d& rgb, Rng& rng) {
  // The luminance weights sum to one, so a uniform shift moves luminance 1:1.
  const double target = luminance(rgb);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Eigen::Vector3d c = random_albedo(rng);
    c.array() += target - luminance(c);
    if ((c.array() >= 0.0).all() && (c.array() <= 1.0).all()) return c;
  }
  return Eigen::Vector3d::Constant(target);
}

IdentityLatent sample_identity(Rng& rng) {
  IdentityLatent id;
  id.head_height = uniform(rng, 0.13, 0.19);
  id.torso_bottom = uniform(rng, 0.48, 0.6);
  id.shoulder_width = uniform(rng, 0.45, 0.75);
  id.leg_width = uniform(rng, 0.14, 0.24);
  id.leg_gap = uniform(rng, 0.02, 0.1);
  const std::size_t n_albedos = 2 + uniform_index(rng, 3);
  for (std::size_t i = 0; i < n_albedos; ++i) id.albedos.push_back(random_albedo(rng));
  id.skin = Eigen::Vector3d(uniform(rng, 0.55, 0.9), uniform(rng, 0.4, 0.7), uniform(rng, 0.3, 0.55));
  id.logo_colour = random_albedo(rng);
  id.logo_w = uniform(rng, 0.2, 0.45);
  id.logo_h = uniform(rng, 0.12, 0.3);
  id.logo_x = uniform(rng, 0.0, 1.0 - id.logo_w);
  id.logo_y = uniform(rng, 0.05, 0.9 - id.logo_h);
  id.emissivity = uniform(rng, 0.8, 1.2);
  return id;
}

Eigen::VectorXd render(const IdentityLatent& id, Modality modality, const RenderOptions& o, Rng& rng) {
  const double H = double(o.height), W = double(o.width);
  Eigen::VectorXd px(static_cast<Eigen::Index>(3 * o.height * o.width));
  const bool infrared = modality == Modality::infrared && !o.red_channel_only;
  auto shade = [&](const Eigen::Vector3d& albedo, bool skin) -> Eigen::Vector3d {
    if (infrared) return Eigen::Vector3d::Constant(infrared_intensity(albedo, id.emissivity, skin));
    return albedo;
  };
  px.setConstant(infrared ? kInfraredBackground : o.background);
  Canvas canvas{px, o.height, o.width};

  const double dx = o.dx, dy = o.dy, cx = W / 2 + dx;
  const double head_top = 0.03 * H + dy, head_bottom = head_top + id.head_height * H;
  const double torso_bottom = id.torso_bottom * H + dy, feet = 0.95 * H + dy;
  const double half_shoulder = id.shoulder_width * W / 2;

  canvas.ellipse((head_top + head_bottom) / 2, cx, (head_bottom - head_top) / 2, 0.17 * W, shade(id.skin, true));
  const Eigen::Vector3d arm = id.albedos.size() >= 4 ? shade(id.albedos[3], false) : shade(id.skin, true);
  canvas.rect(head_bottom + 0.02 * H, torso_bottom + 0.05 * H, cx - half_shoulder - 0.09 * W, cx - half_shoulder, arm);
  canvas.rect(head_bottom + 0.02 * H, torso_bottom + 0.05 * H, cx + half_shoulder, cx + half_shoulder + 0.09 * W, arm);
  canvas.rect(head_bottom, torso_bottom, cx - half_shoulder, cx + half_shoulder, shade(id.albedos[0], false));

  const double torso_h = torso_bottom - head_bottom, torso_w = 2 * half_shoulder;
  const double ly = head_bottom + id.logo_y * torso_h, lx = cx - half_shoulder + id.logo_x * torso_w;
  canvas.rect(ly, ly + id.logo_h * torso_h, lx, lx + id.logo_w * torso_w, shade(id.logo_colour, false));

  const double gap = id.leg_gap * W / 2, leg = id.leg_width * W;
  const double shoe_top = id.albedos.size() >= 3 ? feet - 0.05 * H : feet;
  canvas.rect(torso_bottom, shoe_top, cx - gap - leg, cx - gap, shade(id.albedos[1], false));
  canvas.rect(torso_bottom, shoe_top, cx + gap, cx + gap + leg, shade(id.albedos[1], false));
  if (id.albedos.size() >= 3) {
    canvas.rect(shoe_top, feet, cx - gap - leg, cx - gap, shade(id.albedos[2], false));
    canvas.rect(shoe_top, feet, cx + gap, cx + gap + leg, shade(id.albedos[2], false));
  }

  const Eigen::Index plane = static_cast<Eigen::Index>(o.height * o.width);
  if (o.red_channel_only) {
    px.segment(plane, plane) = px.segment(0, plane);
    px.segment(2 * plane, plane) = px.segment(0, plane);
  }
  px *= o.brightness;
  if (infrared || o.red_channel_only) {
    // One noise field replicated across channels keeps the image grey.
    for (Eigen::Index i = 0; i < plane; ++i) {
      const double v = px[i] + o.noise_sd * normal(rng);
      px[i] = px[plane + i] = px[2 * plane + i] = v;
    }
  } else {
    for (Eigen::Index i = 0; i < px.size(); ++i) px[i] += o.noise_sd * normal(rng);
  }
  return px.cwiseMax(0.0).cwiseMin(1.0);
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == split) out.push_back(i);
  }
  return out;
}

Eigen::Vector3d compute_channel_means(const Dataset& dataset) {
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  std::size_t count = 0;
  const auto plane = static_cast<Eigen::Index>(dataset.config.height * dataset.config.width);
  for (const auto& s : dataset.samples) {
    if (s.split != Split::train) continue;
    for (Eigen::Index c = 0; c < 3; ++c) sum[c] += s.pixels.segment(c * plane, plane).sum();
    count += static_cast<std::size_t>(plane);
  }
  return count ? Eigen::Vector3d(sum / double(count)) : sum;
}

Dataset generate_dataset(const DatasetConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  const std::size_t n_train = config.train_identities();
  const std::size_t n_extra = config.red_channel_identities;
  const std::size_t n_test = config.test_identities();
  ds.num_classes = n_train + n_extra;

  Rng id_rng = make_rng(config.seed, 1);
  std::vector<IdentityLatent> latents;
  for (std::size_t i = 0; i < config.identities + n_extra; ++i) {
    IdentityLatent id = sample_identity(id_rng);
    if (config.twin_every > 0 && i % config.twin_every == config.twin_every - 1 && i > 0) {
      // Same build and markings, different hues at matching luminance.
      id = latents.back();
      for (auto& a : id.albedos) a = luminance_matched_colour(a, id_rng);
      id.logo_colour = luminance_matched_colour(id.logo_colour, id_rng);
    }
    latents.push_back(std::move(id));
  }

  Rng cam_rng = make_rng(config.seed, 2);
  std::array<std::vector<std::pair<double, double>>, 2> cameras;  // brightness, background
  for (auto& table : cameras) {
    for (std::size_t c = 0; c < config.cameras; ++c) {
      table.emplace_back(1.0 + uniform(cam_rng, -config.brightness_jitter, config.brightness_jitter),
                         uniform(cam_rng, 0.2, 0.5));
    }
  }

  const double jitter = std::max(1.0, double(config.width) / 24.0);
  for (std::size_t identity = 0; identity < n_train + n_extra + n_test; ++identity) {
    const bool is_test = identity >= n_train + n_extra;
    const bool is_extra = identity >= n_train && !is_test;
    for (Modality m : {Modality::colour, Modality::infrared}) {
      for (std::size_t k = 0; k < config.per_identity; ++k) {
        Rng rng = make_rng(config.seed, image_stream(identity, m, k));
        RenderOptions o;
        o.height = config.height;
        o.width = config.width;
        o.noise_sd = config.noise_sd;
        const std::size_t camera = uniform_index(rng, config.cameras);
        o.brightness = cameras[std::size_t(label_of(m))][camera].first;
        o.background = cameras[std::size_t(label_of(m))][camera].second;
        o.dx = static_cast<int>(std::lround(uniform(rng, -jitter, jitter)));
        o.dy = static_cast<int>(std::lround(uniform(rng, -jitter, jitter)));
        o.red_channel_only = is_extra && m == Modality::infrared;
        Sample s;
        s.pixels = render(latents[identity], m, o, rng);
        s.identity = static_cast<int>(identity);
        s.modality = m;
        s.camera = static_cast<int>(camera);
        if (!is_test) {
          s.split = Split::train;
        } else if (m == Modality::infrared) {
          s.split = Split::query;
        } else {
          s.split = k == 0 ? Split::gallery : Split::unused;
        }
        ds.samples.push_back(std::move(s));
      }
    }
  }
  ds.channel_means = compute_channel_means(ds);
  return ds;
}

Dataset subset_train_identities(const Dataset& dataset, std::size_t identities) {
  if (identities < 2 || identities > dataset.num_classes) {
    throw ConfigError("subset needs between 2 and " + std::to_string(dataset.num_classes) + " identities");
  }
  Dataset out;
  out.config = dataset.config;
  out.num_classes = identities;
  for (const auto& s : dataset.samples) {
    if (s.split == Split::train && static_cast<std::size_t>(s.identity) >= identities) continue;
    out.samples.push_back(s);
  }
  out.channel_means = compute_channel_means(out);
  return out;
}

void flip_horizontal(Eigen::VectorXd& image, std::size_t height, std::size_t width) {
  for (std::size_t row = 0; row < 3 * height; ++row) {
    auto r = image.segment(static_cast<Eigen::Index>(row * width), static_cast<Eigen::Index>(width));
    r.reverseInPlace();
  }
}

Eigen::VectorXd augment(const Eigen::VectorXd& image, std::size_t height, std::size_t width,
                        const Eigen::Vector3d& fill, const AugmentConfig& config, Rng& rng,
                        AugmentTrace* trace) {
  Eigen::VectorXd out = image;
  AugmentTrace t;
  if (bernoulli(rng, config.flip_p)) {
    flip_horizontal(out, height, width);
    t.flipped = true;
  }
  if (bernoulli(rng, config.erase_p)) {
    const double total = double(height * width);
    for (std::size_t attempt = 0; attempt < config.erase_attempts; ++attempt) {
      const double target = uniform(rng, config.area_min, config.area_max) * total;
      const double aspect = uniform(rng, config.aspect_min, config.aspect_max);
      const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
      const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
      const double frac = double(h * w) / total;
      if (h == 0 || w == 0 || h >= height || w >= width || frac < config.area_min || frac > config.area_max) {
        continue;
      }
      EraseRect r{uniform_index(rng, height - h + 1), uniform_index(rng, width - w + 1), h, w};
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = r.top; y < r.top + h; ++y)
          for (std::size_t x = r.left; x < r.left + w; ++x)
            out[static_cast<Eigen::Index>((c * height + y) * width + x)] = fill[static_cast<Eigen::Index>(c)];
      t.erased = r;
      break;
    }
  }
  if (trace) *trace = t;
  return out;
}

PkSampler::PkSampler(const Dataset& dataset, PkSpec spec, std::uint64_t seed)
    : spec_(spec), rng_(make_rng(seed, 7)) {
  if (spec.p < 2 || spec.k < 2 || spec.k % 2 != 0) {
    throw ConfigError("PK batches need P >= 2 and an even K >= 2, got P=" + std::to_string(spec.p) +
                      " K=" + std::to_string(spec.k));
  }
  std::vector<std::array<std::vector<std::size_t>, 2>> by_id(dataset.num_classes);
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    if (s.split != Split::train) continue;
    by_id.at(static_cast<std::size_t>(s.identity))[std::size_t(label_of(s.modality))].push_back(i);
  }
  for (std::size_t id = 0; id < by_id.size(); ++id) {
    if (by_id[id][0].size() >= spec.k / 2 && by_id[id][1].size() >= spec.k / 2) {
      identities_.push_back(static_cast<int>(id));
      pools_.push_back(std::move(by_id[id]));
    }
  }
  if (identities_.size() < spec.p) {
    throw ConfigError("PK spec infeasible: " + std::to_string(identities_.size()) + " identities have " +
                      std::to_string(spec.k / 2) + " images per modality, P=" + std::to_string(spec.p));
  }
}

std::size_t PkSampler::batches_per_epoch() const {
  return (identities_.size() + spec_.p - 1) / spec_.p;
}

Batch PkSampler::next_batch() {
  std::vector<std::size_t> order(identities_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Partial Fisher-Yates: the first P entries are a uniform draw without replacement.
  for (std::size_t i = 0; i < spec_.p; ++i) {
    std::swap(order[i], order[i + uniform_index(rng_, order.size() - i)]);
  }
  Batch b;
  for (std::size_t i = 0; i < spec_.p; ++i) {
    const std::size_t slot = order[i];
    for (std::size_t m = 0; m < 2; ++m) {
      std::vector<std::size_t> pool = pools_[slot][m];
      for (std::size_t j = 0; j < spec_.k / 2; ++j) {
        std::swap(pool[j], pool[j + uniform_index(rng_, pool.size() - j)]);
        b.sample_indices.push_back(pool[j]);
        b.labels.push_back(identities_[slot]);
        b.modalities.push_back(static_cast<Modality>(m));
      }
    }
  }
  return b;
}

Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices,
                    const AugmentConfig* augment_config, Rng* rng) {
  const std::size_t h = dataset.config.height, w = dataset.config.width;
  const std::size_t per = 3 * h * w;
  std::vector<double> values(indices.size() * per);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Eigen::VectorXd& src = dataset.samples.at(indices[i]).pixels;
    Eigen::Map<Eigen::VectorXd> dst(values.data() + i * per, static_cast<Eigen::Index>(per));
    if (augment_config && rng) {
      dst = augment(src, h, w, dataset.channel_means, *augment_config, *rng);
    } else {
      dst = src;
    }
  }
  return Tensor({indices.size(), 3, h, w}, std::move(values), false);
}

void export_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  static_assert(std::endian::native == std::endian::little, "image blobs are little-endian");
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw std::runtime_error("cannot create " + (dir / "images").string() + ": " + ec.message());

  const auto& c = dataset.config;
  nlohmann::json meta = {
      {"identities", c.identities},       {"per_identity", c.per_identity},
      {"seed", c.seed},                   {"height", c.height},
      {"width", c.width},                 {"cameras", c.cameras},
      {"noise_sd", c.noise_sd},           {"brightness_jitter", c.brightness_jitter},
      {"twin_every", c.twin_every},       {"red_channel_identities", c.red_channel_identities},
      {"num_classes", dataset.num_classes},
      {"channel_means", {dataset.channel_means[0], dataset.channel_means[1], dataset.channel_means[2]}},
  };
  std::ofstream(dir / "dataset.json") << meta.dump(2) << '\n';

  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.csv").string());
  manifest << "index,file,identity,modality,camera,split\n";
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << i << ".bin";
    manifest << i << ',' << name.str() << ',' << s.identity << ',' << label_of(s.modality) << ','
             << s.camera << ',' << to_string(s.split) << '\n';
    std::ofstream blob(dir / name.str(), std::ios::binary);
    blob.write(reinterpret_cast<const char*>(s.pixels.data()),
               static_cast<std::streamsize>(s.pixels.size() * sizeof(double)));
    if (!blob) throw std::runtime_error("cannot write " + (dir / name.str()).string());
  }
}

Dataset import_dataset(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "dataset.json");
  if (!meta_in) throw ConfigError("no dataset at " + dir.string() + " (dataset.json missing)");
  nlohmann::json meta;
  try {
    meta_in >> meta;
  } catch (const std::exception& e) {
    throw ConfigError("malformed dataset.json: " + std::string(e.what()));
  }
  Dataset ds;
  auto& c = ds.config;
  c.identities = meta.at("identities");
  c.per_identity = meta.at("per_identity");
  c.seed = meta.at("seed");
  c.height = meta.at("height");
  c.width = meta.at("width");
  c.cameras = meta.at("cameras");
  c.noise_sd = meta.at("noise_sd");
  c.brightness_jitter = meta.at("brightness_jitter");
  c.twin_every = meta.at("twin_every");
  c.red_channel_identities = meta.at("red_channel_identities");
  ds.num_classes = meta.at("num_classes");
  for (int i = 0; i < 3; ++i) ds.channel_means[i] = meta.at("channel_means").at(i);

  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw ConfigError("missing manifest.csv in " + dir.string());
  std::string line;
  std::getline(manifest, line);
  if (line != "index,file,identity,modality,camera,split") throw ConfigError("unexpected manifest header");
  const std::size_t count = 3 * c.height * c.width;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string index, file, identity, modality, camera, split;
    std::getline(row, index, ',');
    std::getline(row, file, ',');
    std::getline(row, identity, ',');
    std::getline(row, modality, ',');
    std::getline(row, camera, ',');
    std::getline(row, split, ',');
    Sample s;
    try {
      s.identity = std::stoi(identity);
      s.modality = static_cast<Modality>(std::stoi(modality));
      s.camera = std::stoi(camera);
    } catch (const std::exception&) {
      throw ConfigError("malformed manifest row: " + line);
    }
    s.split = parse_split(split);
    s.pixels.resize(static_cast<Eigen::Index>(count));
    std::ifstream blob(dir / file, std::ios::binary);
    blob.read(reinterpret_cast<char*>(s.pixels.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!blob) throw ConfigError("image blob " + file + " missing or short");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace xmreid
