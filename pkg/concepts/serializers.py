from rest_framework import serializers

from .exceptions import ContractError
from .models import ConceptFamily, DatasetSplit, ModelKind
from .pmoc import EncoderBackboneConfig, LossMode
from .pose import StackVariant

RUN_CONFIG_SCHEMA_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1


class AugmentSpecSerializer(serializers.Serializer):
    """Serializer for one episode's rotation / flip record"""

    rotation = serializers.ChoiceField(choices=[0, 90, 180, 270])
    hflip = serializers.BooleanField()
    vflip = serializers.BooleanField()


class ManifestImageSerializer(serializers.Serializer):
    file = serializers.RegexField(r'^img_\d{2}\.pgm$')
    sha256 = serializers.RegexField(r'^[0-9a-f]{64}$')


class ManifestEpisodeSerializer(serializers.Serializer):
    """Serializer for one manifest entry; image count is checked by the loader"""

    id = serializers.RegexField(r'^[A-Za-z0-9_.-]+$', max_length=255)
    family = serializers.ChoiceField(choices=ConceptFamily.choices)
    split = serializers.ChoiceField(choices=DatasetSplit.choices)
    seed = serializers.IntegerField(min_value=0)
    image_side = serializers.IntegerField(min_value=8)
    concept_params = serializers.JSONField()
    augment = AugmentSpecSerializer(allow_null=True, required=False, default=None)
    images = ManifestImageSerializer(many=True)


class DatasetManifestSerializer(serializers.Serializer):
    """Serializer for a dataset directory's manifest.json"""

    schema_version = serializers.IntegerField()
    episodes = ManifestEpisodeSerializer(many=True)

    def validate_schema_version(self, value):
        if value != MANIFEST_SCHEMA_VERSION:
            raise serializers.ValidationError(
                f"Unsupported manifest schema_version {value}; expected {MANIFEST_SCHEMA_VERSION}"
            )
        return value

    def validate_episodes(self, value):
        ids = [episode['id'] for episode in value]
        if len(ids) != len(set(ids)):
            raise serializers.ValidationError('Episode ids must be unique')
        return value


class EncoderSerializer(serializers.Serializer):
    channels = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=2, default=[1, 16, 32, 64])
    image_side = serializers.IntegerField(min_value=8, default=64)
    d = serializers.IntegerField(min_value=1, default=64)
    m = serializers.IntegerField(min_value=1, default=4)
    n_perspectives = serializers.IntegerField(min_value=1, default=16)

    def validate(self, attrs):
        try:
            EncoderBackboneConfig(**attrs)
        except ContractError as e:
            raise serializers.ValidationError(str(e)) from e
        return attrs


class HeadSerializer(serializers.Serializer):
    variant = serializers.ChoiceField(choices=[v.value for v in StackVariant], required=False)
    N = serializers.IntegerField(min_value=1, default=2)
    spectral_norm = serializers.BooleanField(default=True)


class OptimizerSerializer(serializers.Serializer):
    step_size = serializers.FloatField(min_value=0.0, default=1e-3)
    decay = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.995)
    weight_decay = serializers.FloatField(min_value=0.0, default=1e-4)
    batch_size = serializers.IntegerField(min_value=1, required=False)

    def validate_step_size(self, value):
        if value <= 0:
            raise serializers.ValidationError('step_size must be positive')
        return value


class SinkhornSerializer(serializers.Serializer):
    epsilon = serializers.FloatField(required=False)
    max_iters = serializers.IntegerField(min_value=1, required=False)
    tol = serializers.FloatField(required=False)

    def validate(self, attrs):
        for key in ('epsilon', 'tol'):
            if key in attrs and attrs[key] <= 0:
                raise serializers.ValidationError({key: 'must be positive'})
        return attrs


class RunConfigSerializer(serializers.Serializer):
    """
    Serializer for the JSON run configuration read by the train command.

    ``save()`` returns a frozen ``training.RunConfig`` with every default
    resolved.
    """

    schema_version = serializers.IntegerField()
    name = serializers.RegexField(r'^[A-Za-z0-9_.-]+$', max_length=255)
    model = serializers.ChoiceField(choices=ModelKind.choices)
    seed = serializers.IntegerField(min_value=0)
    epochs = serializers.IntegerField(min_value=0, default=50)
    dataset = serializers.CharField()
    loss_mode = serializers.ChoiceField(choices=[m.value for m in LossMode], default=LossMode.SOFTMAX.value)
    augment = serializers.BooleanField(default=True)
    warm_start = serializers.CharField(required=False, allow_null=True, default=None)
    encoder = EncoderSerializer(required=False)
    head = HeadSerializer(required=False)
    optimizer = OptimizerSerializer(required=False)
    sinkhorn = SinkhornSerializer(required=False)

    def validate_schema_version(self, value):
        if value != RUN_CONFIG_SCHEMA_VERSION:
            raise serializers.ValidationError(
                f"Unsupported run config schema_version {value}; expected {RUN_CONFIG_SCHEMA_VERSION}"
            )
        return value

    def validate(self, attrs):
        head = attrs.get('head') or {}
        variant = head.get('variant')
        if attrs['model'] == ModelKind.PMOC_V2_STRAW and variant not in (None, StackVariant.STRAW.value):
            raise serializers.ValidationError({'head': f"model pmoc-v2-straw needs the straw variant, got {variant}"})
        if attrs['model'] == ModelKind.SBSD and attrs.get('warm_start'):
            raise serializers.ValidationError({'warm_start': 'warm start applies to PMoC models only'})
        encoder = attrs.get('encoder') or {}
        channels = encoder.get('channels', [1])
        if channels[0] != 1:
            raise serializers.ValidationError({'encoder': 'conv schedule must start at 1 channel'})
        if encoder.get('d', 64) % encoder.get('m', 4):
            raise serializers.ValidationError({'encoder': 'd must be divisible by m'})
        return attrs

    def create(self, validated_data):
        from .training import build_run_config

        return build_run_config(validated_data)


def load_run_config(raw):
    """Validate a parsed run-config dict; raises ``serializers.ValidationError``"""
    serializer = RunConfigSerializer(data=raw)
    serializer.is_valid(raise_exception=True)
    return serializer.save(raw=raw)


class HeadComparisonSerializer(serializers.Serializer):
    """Serializer for one stack entry read by the compare command"""

    variant = serializers.ChoiceField(choices=[v.value for v in StackVariant])
    n = serializers.IntegerField(min_value=1, default=7)
    d = serializers.IntegerField(min_value=1, default=64)
    m = serializers.IntegerField(min_value=1, default=4)
    N = serializers.IntegerField(min_value=1, default=2)
    batch = serializers.IntegerField(min_value=1, default=40)
    steps = serializers.IntegerField(min_value=1, default=5)

    def validate(self, attrs):
        if attrs['d'] % attrs['m']:
            raise serializers.ValidationError({'d': 'd must be divisible by m'})
        return attrs

    def create(self, validated_data):
        from .comparison import ComparisonConfig

        return ComparisonConfig(**validated_data)
