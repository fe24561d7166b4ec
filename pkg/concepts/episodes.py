"""
Mini-Bongard episodes: the 14-image data model, synthetic concept generators
and the rotation / flip augmentation protocol.

Image indices are 0-based in arrays and 1-based in names: images 1..6 are the
primary group, 7 the positive test, 8..13 the auxiliary group and 14 the
negative test. Geometry records use (x, y) = (column, row) pixel coordinates.
"""
import itertools
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional

import numpy as np
from PIL import Image, ImageDraw

from .exceptions import ContractError
from .models import ConceptFamily, DatasetSplit
from .utils import derive_seed

logger = logging.getLogger(__name__)

EPISODE_SIZE = 14
CONCEPT_TRUE = 7
DEFAULT_SIDE = 64
ROTATIONS = (0, 90, 180, 270)
MAX_PLACEMENT_TRIES = 2000

# unit step per relation in (x, y) image coordinates
DIRECTIONS = {
    'above': (0, -1),
    'below': (0, 1),
    'left-of': (-1, 0),
    'right-of': (1, 0),
}


def split_for_seed(seed):
    """Hash partition of episode seeds: 80% train, 10% val, 10% test"""
    bucket = derive_seed('split', seed) % 100
    if bucket < 80:
        return DatasetSplit.TRAIN.value
    if bucket < 90:
        return DatasetSplit.VAL.value
    return DatasetSplit.TEST.value


@dataclass(frozen=True)
class AugmentSpec:
    """Rotation by a multiple of 90 degrees, then optional horizontal and vertical flips"""

    rotation: int = 0
    hflip: bool = False
    vflip: bool = False

    def __post_init__(self):
        if self.rotation not in ROTATIONS:
            raise ContractError(f"rotation must be one of {ROTATIONS}, got {self.rotation}")

    @classmethod
    def sample(cls, seed):
        rng = np.random.default_rng(seed)
        return cls(
            rotation=ROTATIONS[int(rng.integers(len(ROTATIONS)))],
            hflip=bool(rng.integers(2)),
            vflip=bool(rng.integers(2)),
        )

    @classmethod
    def every(cls):
        """All 16 parameter combinations (8 distinct transforms)"""
        return [cls(r, h, v) for r, h, v in itertools.product(ROTATIONS, (False, True), (False, True))]

    @classmethod
    def from_dict(cls, data):
        return cls(rotation=int(data['rotation']), hflip=bool(data['hflip']), vflip=bool(data['vflip']))

    def as_dict(self):
        return {'rotation': self.rotation, 'hflip': self.hflip, 'vflip': self.vflip}

    @property
    def quarter_turns(self):
        return self.rotation // 90

    def apply_images(self, images):
        """Transform the trailing (side, side) axes of ``images``"""
        out = np.rot90(images, self.quarter_turns, axes=(-2, -1))
        if self.hflip:
            out = np.flip(out, axis=-1)
        if self.vflip:
            out = np.flip(out, axis=-2)
        return np.ascontiguousarray(out)

    def apply_point(self, x, y, side):
        last = side - 1
        for _ in range(self.quarter_turns):
            x, y = y, last - x
        if self.hflip:
            x = last - x
        if self.vflip:
            y = last - y
        return x, y

    def apply_direction(self, dx, dy):
        for _ in range(self.quarter_turns):
            dx, dy = dy, -dx
        if self.hflip:
            dx = -dx
        if self.vflip:
            dy = -dy
        return dx, dy


@dataclass
class BongardEpisode:
    """One 14-image problem plus the generator record that explains it"""

    episode_id: str
    family: str
    split: str
    seed: int
    images: np.ndarray
    concept_params: Dict[str, Any]
    augment: Optional[AugmentSpec] = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim != 3 or images.shape[0] != EPISODE_SIZE:
            raise ContractError(
                f"episode {self.episode_id}: expected {EPISODE_SIZE} images, got array of shape {images.shape}"
            )
        if images.shape[1] != images.shape[2]:
            raise ContractError(f"episode {self.episode_id}: images must be square, got {images.shape[1:]}")
        if images.min() < 0.0 or images.max() > 1.0:
            raise ContractError(f"episode {self.episode_id}: pixel values must lie in [0, 1]")
        self.images = images
        self.family = ConceptFamily(self.family).value
        self.split = DatasetSplit(self.split).value

    def __str__(self):
        return f"{self.episode_id} ({self.family}, {self.split})"

    @property
    def image_side(self):
        return self.images.shape[-1]

    @property
    def primary(self):
        return self.images[0:6]

    @property
    def positive_test(self):
        return self.images[6]

    @property
    def auxiliary(self):
        return self.images[7:13]

    @property
    def negative_test(self):
        return self.images[13]

    def image(self, number):
        """Image by its 1-based episode number"""
        if not 1 <= number <= EPISODE_SIZE:
            raise ContractError(f"image number must lie in 1..{EPISODE_SIZE}, got {number}")
        return self.images[number - 1]


class ConceptGenerator(ABC):
    """Abstract base class for one synthetic concept family"""

    family: str = None
    # smallest canvas on which sample_geometry places shapes reliably
    min_side: int = 8

    @abstractmethod
    def sample_rule(self, rng) -> Dict[str, Any]:
        """Draw the episode-level rule record"""
        pass

    @abstractmethod
    def sample_shapes(self, rng, side) -> Dict[str, Any]:
        """Draw one image's geometry record, without regard to the rule"""
        pass

    @abstractmethod
    def holds(self, rule, geometry) -> bool:
        """Oracle: does ``geometry`` satisfy ``rule``"""
        pass

    @abstractmethod
    def draw(self, canvas: ImageDraw.ImageDraw, geometry):
        pass

    @abstractmethod
    def transform_geometry(self, geometry, spec: AugmentSpec, side) -> Dict[str, Any]:
        pass

    def transform_rule(self, rule, spec: AugmentSpec) -> Dict[str, Any]:
        return dict(rule)

    def sample_geometry(self, rng, rule, positive, side):
        """Rejection-sample shapes until the oracle agrees with the requested group"""
        for _ in range(MAX_PLACEMENT_TRIES):
            geometry = self.sample_shapes(rng, side)
            if geometry is not None and self.holds(rule, geometry) == positive:
                return geometry
        raise ContractError(f"{self.family}: could not place shapes on a {side}x{side} canvas")

    def render(self, geometry, side):
        image = Image.new('L', (side, side), 0)
        self.draw(ImageDraw.Draw(image), geometry)
        return np.asarray(image, dtype=np.float32) / 255.0


def _transform_box(box, spec, side):
    x0, y0 = spec.apply_point(box[0], box[1], side)
    x1, y1 = spec.apply_point(box[2], box[3], side)
    return [min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)]


def _boxes_overlap(a, b, gap=2):
    return not (a[2] + gap < b[0] or b[2] + gap < a[0] or a[3] + gap < b[1] or b[3] + gap < a[1])


def _is_convex(vertices):
    turns = []
    count = len(vertices)
    for index in range(count):
        ax, ay = vertices[index]
        bx, by = vertices[(index + 1) % count]
        cx, cy = vertices[(index + 2) % count]
        turns.append((bx - ax) * (cy - by) - (by - ay) * (cx - bx))
    return all(t >= 0 for t in turns) or all(t <= 0 for t in turns)


class CountParityGenerator(ConceptGenerator):
    """Even vs odd number of dots; placement carries no information"""

    family = ConceptFamily.COUNT_PARITY.value
    min_side = 24
    counts = range(1, 9)

    def sample_rule(self, rng):
        return {'parity': 'even' if rng.integers(2) else 'odd'}

    def sample_shapes(self, rng, side):
        radius = max(2, side // 21)
        count = int(rng.choice(self.counts))
        low, high = radius + 1, side - radius - 2
        spacing = 2 * radius + 3
        dots = []
        for _ in range(MAX_PLACEMENT_TRIES):
            if len(dots) == count:
                break
            x, y = (int(v) for v in rng.integers(low, high + 1, size=2))
            if all(math.hypot(x - px, y - py) >= spacing for px, py in dots):
                dots.append([x, y])
        if len(dots) != count:
            return None
        return {'radius': radius, 'dots': dots}

    def holds(self, rule, geometry):
        remainder = 0 if rule['parity'] == 'even' else 1
        return len(geometry['dots']) % 2 == remainder

    def draw(self, canvas, geometry):
        r = geometry['radius']
        for x, y in geometry['dots']:
            canvas.ellipse([x - r, y - r, x + r, y + r], fill=255)

    def transform_geometry(self, geometry, spec, side):
        dots = [list(spec.apply_point(x, y, side)) for x, y in geometry['dots']]
        return {'radius': geometry['radius'], 'dots': dots}


class PositionRelationGenerator(ConceptGenerator):
    """A filled square strictly on one side of a ring, or not"""

    family = ConceptFamily.POSITION_RELATION.value
    min_side = 16

    def sample_rule(self, rng):
        return {'relation': 'above'}

    def _box(self, rng, side):
        size = int(rng.integers(side // 8, side // 4 + 1))
        x0, y0 = (int(v) for v in rng.integers(1, side - size - 1, size=2))
        return [x0, y0, x0 + size - 1, y0 + size - 1]

    def sample_shapes(self, rng, side):
        a, b = self._box(rng, side), self._box(rng, side)
        if _boxes_overlap(a, b):
            return None
        return {'a': a, 'b': b}

    def holds(self, rule, geometry):
        a, b = geometry['a'], geometry['b']
        dx, dy = DIRECTIONS[rule['relation']]
        if dy < 0:
            return a[3] < b[1]
        if dy > 0:
            return a[1] > b[3]
        if dx < 0:
            return a[2] < b[0]
        return a[0] > b[2]

    def draw(self, canvas, geometry):
        canvas.rectangle(geometry['a'], fill=255)
        canvas.ellipse(geometry['b'], outline=255, width=2)

    def transform_geometry(self, geometry, spec, side):
        return {'a': _transform_box(geometry['a'], spec, side), 'b': _transform_box(geometry['b'], spec, side)}

    def transform_rule(self, rule, spec):
        direction = spec.apply_direction(*DIRECTIONS[rule['relation']])
        relation = next(name for name, step in DIRECTIONS.items() if step == direction)
        return {'relation': relation}


class ConvexityGenerator(ConceptGenerator):
    """Convex polygon (vertices on a circle) vs concave star"""

    family = ConceptFamily.CONVEXITY.value
    min_side = 16

    def sample_rule(self, rng):
        return {'target': 'convex' if rng.integers(2) else 'concave'}

    def sample_shapes(self, rng, side):
        radius = float(rng.uniform(0.2 * side, 0.35 * side))
        cx, cy = (float(v) for v in rng.uniform(radius + 1, side - radius - 2, size=2))
        start = float(rng.uniform(0, 2 * math.pi))
        if rng.integers(2):
            corners = int(rng.integers(5, 9))
            jitter = rng.uniform(-0.3, 0.3, size=corners) * math.pi / corners
            angles = [start + 2 * math.pi * i / corners + float(jitter[i]) for i in range(corners)]
            radii = [radius] * corners
        else:
            tips = int(rng.integers(3, 6))
            inner = radius * float(rng.uniform(0.35, 0.55))
            angles = [start + math.pi * i / tips for i in range(2 * tips)]
            radii = [radius if i % 2 == 0 else inner for i in range(2 * tips)]
        vertices = [
            [round(cx + r * math.cos(t), 2), round(cy + r * math.sin(t), 2)]
            for r, t in zip(radii, angles)
        ]
        return {'vertices': vertices}

    def holds(self, rule, geometry):
        return _is_convex(geometry['vertices']) == (rule['target'] == 'convex')

    def draw(self, canvas, geometry):
        canvas.polygon([tuple(v) for v in geometry['vertices']], fill=255)

    def transform_geometry(self, geometry, spec, side):
        return {'vertices': [list(spec.apply_point(x, y, side)) for x, y in geometry['vertices']]}


def get_generator(family: str) -> ConceptGenerator:
    """Factory function to get the generator for a concept family"""
    generators = {
        ConceptFamily.COUNT_PARITY.value: CountParityGenerator(),
        ConceptFamily.POSITION_RELATION.value: PositionRelationGenerator(),
        ConceptFamily.CONVEXITY.value: ConvexityGenerator(),
    }

    if family not in generators:
        raise ContractError(f"Unknown concept family: {family}. Available: {list(generators.keys())}")

    return generators[family]


def generate_episode(family, seed, image_side=DEFAULT_SIDE, split=None) -> BongardEpisode:
    """
    Render one episode; (family, seed, image_side) fully determine its bytes.

    Images 1..7 satisfy the drawn rule, images 8..14 violate it.
    """
    family = ConceptFamily(family).value
    generator = get_generator(family)
    if image_side < generator.min_side:
        raise ContractError(f"{family} needs an image side of at least {generator.min_side}, got {image_side}")
    rng = np.random.default_rng(seed)
    rule = generator.sample_rule(rng)
    geometries = [
        generator.sample_geometry(rng, rule, index < CONCEPT_TRUE, image_side)
        for index in range(EPISODE_SIZE)
    ]
    images = np.stack([generator.render(geometry, image_side) for geometry in geometries])
    return BongardEpisode(
        episode_id=f"{family}-{seed}",
        family=family,
        split=split or split_for_seed(seed),
        seed=int(seed),
        images=images,
        concept_params={'rule': rule, 'images': geometries},
    )


def min_image_side(families):
    """Largest of the per-family minimum image sides"""
    return max(get_generator(ConceptFamily(f).value).min_side for f in families)


def episode_seeds(seed, split='auto'):
    """Endless stream of per-episode seeds; a fixed split keeps only seeds hashed into it"""
    for index in itertools.count():
        candidate = derive_seed('episode', seed, index) % (2 ** 31)
        if split == 'auto' or split_for_seed(candidate) == split:
            yield candidate


def generate_dataset(families, count, seed, split='auto', image_side=DEFAULT_SIDE):
    """``count`` episodes cycling through ``families``"""
    families = [ConceptFamily(f).value for f in families]
    if not families:
        raise ContractError('generate_dataset needs at least one family')
    episodes = []
    for index, episode_seed in zip(range(count), episode_seeds(seed, split)):
        episodes.append(generate_episode(families[index % len(families)], episode_seed, image_side))
    logger.info(f"Generated {len(episodes)} episodes over {families} from seed {seed}")
    return episodes


def oracle_labels(episode: BongardEpisode):
    """Rule-based concept membership of all 14 images, read from concept_params"""
    generator = get_generator(episode.family)
    rule = episode.concept_params['rule']
    return [generator.holds(rule, geometry) for geometry in episode.concept_params['images']]


def augment_episode(episode: BongardEpisode, seed) -> BongardEpisode:
    """
    Apply one sampled AugmentSpec to all 14 images and to their geometry records.

    Test-split episodes are never augmented.
    """
    if episode.split == DatasetSplit.TEST.value:
        raise ContractError(f"episode {episode.episode_id} is in the test split and cannot be augmented")
    spec = AugmentSpec.sample(seed)
    generator = get_generator(episode.family)
    side = episode.image_side
    concept_params = {
        'rule': generator.transform_rule(episode.concept_params['rule'], spec),
        'images': [
            generator.transform_geometry(geometry, spec, side)
            for geometry in episode.concept_params['images']
        ],
    }
    return replace(episode, images=spec.apply_images(episode.images), concept_params=concept_params, augment=spec)
