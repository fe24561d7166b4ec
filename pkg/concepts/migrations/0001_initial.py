# Generated by Django 6.0 on 2026-10-17 09:12

import django.core.validators
import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(db_index=True, max_length=255)),
                ('model_kind', models.CharField(choices=[('sbsd', 'Sinkhorn contrastive solver'), ('pmoc-v1', 'PMoC, Gaussian head'), ('pmoc-v2', 'PMoC, direct-probability head'), ('pmoc-v2-straw', 'PMoC, direct-probability head on a straw pose stack')], db_index=True, help_text='Model trained by this run', max_length=32)),
                ('seed', models.BigIntegerField()),
                ('config', models.JSONField(help_text='Run configuration exactly as read from disk')),
                ('run_dir', models.CharField(max_length=500)),
                ('dataset_path', models.CharField(max_length=500)),
                ('code_version', models.CharField(blank=True, max_length=64)),
                ('status', models.CharField(choices=[('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed'), ('diverged', 'Diverged')], default='running', max_length=16)),
                ('epochs_completed', models.PositiveIntegerField(default=0)),
                ('best_val_pairwise', models.FloatField(blank=True, null=True)),
                ('final_report', models.JSONField(blank=True, null=True)),
                ('error', models.TextField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'verbose_name': 'Training Run',
                'verbose_name_plural': 'Training Runs',
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='EvaluationRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('checkpoint_path', models.CharField(max_length=500)),
                ('data_path', models.CharField(max_length=500)),
                ('split', models.CharField(blank=True, choices=[('train', 'Train'), ('val', 'Validation'), ('test', 'Test')], max_length=8)),
                ('episodes', models.PositiveIntegerField(validators=[django.core.validators.MinValueValidator(0)])),
                ('per_image_accuracy', models.FloatField()),
                ('pairwise_accuracy', models.FloatField()),
                ('per_family', models.JSONField(default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(blank=True, null=True, on_delete=django.db.models.deletion.SET_NULL, related_name='evaluations', to='concepts.trainingrun')),
            ],
            options={
                'verbose_name': 'Evaluation Record',
                'verbose_name_plural': 'Evaluation Records',
                'ordering': ['-created_at'],
            },
        ),
    ]
